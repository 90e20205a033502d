#include "fluorotask/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fluorotask/rng.hpp"

namespace fs = std::filesystem;

namespace fluorotask {

SplitIds split_by_hash(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
    std::uint64_t ha = derive_seed(0, a), hb = derive_seed(0, b);
    return ha != hb ? ha < hb : a < b;
  });
  const int n = static_cast<int>(ids.size());
  const int n_train = static_cast<int>(std::lround(0.70 * n));
  const int n_val = static_cast<int>(std::lround(0.15 * n));
  SplitIds s;
  s.train.assign(ids.begin(), ids.begin() + n_train);
  s.val.assign(ids.begin() + n_train, ids.begin() + std::min(n, n_train + n_val));
  s.test.assign(ids.begin() + std::min(n, n_train + n_val), ids.end());
  return s;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               int width, int height) {
  if (static_cast<std::size_t>(width) * height != pixels.size()) {
    throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError(DatasetError::Kind::kMissingFile, "cannot open: " + path);
  std::string magic;
  is >> magic;
  int maxval = 0;
  is >> width >> height >> maxval;
  if (!is || magic != "P5" || maxval != 255 || width <= 0 || height <= 0) {
    throw DatasetError(DatasetError::Kind::kParse, "not an 8-bit P5 PGM: " + path);
  }
  is.get();  // the single whitespace after maxval
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  is.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (!is) throw DatasetError(DatasetError::Kind::kParse, "truncated PGM: " + path);
  return pixels;
}

const SampleRecord* Dataset::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

std::vector<const SampleRecord*> Dataset::split_records(const std::string& which) const {
  const std::vector<std::string>* ids = nullptr;
  if (which == "train") ids = &splits.train;
  else if (which == "val") ids = &splits.val;
  else if (which == "test") ids = &splits.test;
  else throw std::invalid_argument("unknown split: " + which);
  std::vector<const SampleRecord*> out;
  out.reserve(ids->size());
  for (const auto& id : *ids) {
    const SampleRecord* r = find(id);
    if (!r) throw DatasetError(DatasetError::Kind::kMissingFile, "split id not in dataset: " + id);
    out.push_back(r);
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records,
                  const GeneratorConfig& cfg) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  fs::create_directories(fs::path(dir) / "annotations");

  std::vector<std::string> ids;
  for (const SampleRecord& rec : records) {
    ids.push_back(rec.id);
    const int n = rec.size;
    std::vector<std::uint8_t> img(rec.image.size()), msk(rec.mask.size());
    for (std::size_t i = 0; i < rec.image.size(); ++i) {
      img[i] = static_cast<std::uint8_t>(std::lround(rec.image[i] * 255.0));
      msk[i] = rec.mask[i] ? 255 : 0;
    }
    write_pgm((fs::path(dir) / "images" / (rec.id + ".pgm")).string(), img, n, n);
    write_pgm((fs::path(dir) / "masks" / (rec.id + ".pgm")).string(), msk, n, n);

    nlohmann::json ann;
    ann["id"] = rec.id;
    ann["seed"] = rec.seed;
    ann["electrodes"] = nlohmann::json::array();
    for (const ElectrodeBox& e : rec.electrodes) {
      ann["electrodes"].push_back({{"cx", e.cx}, {"cy", e.cy}, {"w", e.w}, {"h", e.h}});
    }
    ann["centerline"] = nlohmann::json::array();
    for (const auto& p : rec.centerline) ann["centerline"].push_back({p[0], p[1]});
    std::ofstream os(fs::path(dir) / "annotations" / (rec.id + ".json"));
    os << ann.dump(2) << "\n";
    if (!os) throw std::runtime_error("write failed: " + rec.id + ".json");
  }

  nlohmann::json manifest;
  manifest["version"] = kDatasetVersion;
  manifest["size"] = records.empty() ? cfg.size : records.front().size;
  manifest["count"] = records.size();
  manifest["generator"] = cfg;
  {
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
  }

  const SplitIds splits = split_by_hash(ids);
  nlohmann::json sj = {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}};
  std::ofstream os(fs::path(dir) / "splits.json");
  os << sj.dump(2) << "\n";
}

namespace {

nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DatasetError(DatasetError::Kind::kMissingFile, "cannot open: " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(DatasetError::Kind::kParse,
                       "malformed JSON in " + path + ": " + e.what());
  }
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.json")) {
    return ds;  // empty directory → empty collection, by contract
  }
  const nlohmann::json manifest = parse_json_file((root / "manifest.json").string());
  const int version = manifest.value("version", -1);
  if (version != kDatasetVersion) {
    throw DatasetError(DatasetError::Kind::kVersionMismatch,
                       "dataset schema version " + std::to_string(version) +
                           " (expected " + std::to_string(kDatasetVersion) + ") in " +
                           (root / "manifest.json").string());
  }
  if (manifest.contains("generator")) ds.generator = manifest["generator"].get<GeneratorConfig>();
  ds.size = manifest.value("size", 0);

  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root / "images")) {
    if (entry.path().extension() == ".pgm") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());

  for (const std::string& id : ids) {
    SampleRecord rec;
    rec.id = id;
    int iw = 0, ih = 0, mw = 0, mh = 0;
    const auto img = read_pgm((root / "images" / (id + ".pgm")).string(), iw, ih);
    const auto msk = read_pgm((root / "masks" / (id + ".pgm")).string(), mw, mh);
    if (iw != mw || ih != mh || iw != ih) {
      throw DatasetError(DatasetError::Kind::kShapeMismatch,
                         "image " + std::to_string(iw) + "x" + std::to_string(ih) +
                             " vs mask " + std::to_string(mw) + "x" + std::to_string(mh) +
                             " for " + (root / "masks" / (id + ".pgm")).string());
    }
    rec.size = iw;
    rec.image.resize(img.size());
    rec.mask.resize(msk.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
      rec.image[i] = img[i] / 255.0;
      rec.mask[i] = msk[i] >= 128 ? 1 : 0;
    }

    const std::string ann_path = (root / "annotations" / (id + ".json")).string();
    const nlohmann::json ann = parse_json_file(ann_path);
    try {
      rec.seed = ann.value("seed", std::uint64_t{0});
      for (const auto& e : ann.at("electrodes")) {
        rec.electrodes.push_back({e.at("cx").get<double>(), e.at("cy").get<double>(),
                                  e.at("w").get<double>(), e.at("h").get<double>()});
      }
      for (const auto& p : ann.value("centerline", nlohmann::json::array())) {
        rec.centerline.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(DatasetError::Kind::kParse,
                         "bad annotation schema in " + ann_path + ": " + e.what());
    }
    ds.records.push_back(std::move(rec));
  }

  if (fs::exists(root / "splits.json")) {
    const nlohmann::json sj = parse_json_file((root / "splits.json").string());
    ds.splits.train = sj.value("train", std::vector<std::string>{});
    ds.splits.val = sj.value("val", std::vector<std::string>{});
    ds.splits.test = sj.value("test", std::vector<std::string>{});
  } else {
    ds.splits = split_by_hash(ids);
  }
  return ds;
}

}  // namespace fluorotask
