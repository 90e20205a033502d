#include "fluorotask/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fluorotask/losses.hpp"
#include "fluorotask/ops.hpp"
#include "fluorotask/optim.hpp"
#include "fluorotask/rng.hpp"

namespace fluorotask {

namespace fs = std::filesystem;

namespace {

constexpr int kValidateEvery = 100;
constexpr int kHeadStride = 4;
constexpr int kMaxConsecutiveSkips = 10;

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

}  // namespace

void to_json(nlohmann::json& j, const DataSection& d) {
  j = nlohmann::json{{"dir", d.dir},
                     {"generator", d.generator},
                     {"n_train", d.n_train},
                     {"n_val", d.n_val},
                     {"n_test", d.n_test},
                     {"augment", d.augment},
                     {"augment_cfg",
                      {{"flips", d.augment_cfg.flips},
                       {"rotations", d.augment_cfg.rotations},
                       {"zoom_prob", d.augment_cfg.zoom_prob}}}};
}

void from_json(const nlohmann::json& j, DataSection& d) {
  DataSection def;
  d.dir = j.value("dir", def.dir);
  d.generator = j.value("generator", def.generator);
  d.n_train = j.value("n_train", def.n_train);
  d.n_val = j.value("n_val", def.n_val);
  d.n_test = j.value("n_test", def.n_test);
  d.augment = j.value("augment", def.augment);
  if (j.contains("augment_cfg")) {
    const nlohmann::json& a = j.at("augment_cfg");
    d.augment_cfg.flips = a.value("flips", def.augment_cfg.flips);
    d.augment_cfg.rotations = a.value("rotations", def.augment_cfg.rotations);
    d.augment_cfg.zoom_prob = a.value("zoom_prob", def.augment_cfg.zoom_prob);
  }
}

void to_json(nlohmann::json& j, const OptimSection& o) {
  j = nlohmann::json{{"lr", o.lr},
                     {"beta1", o.beta1},
                     {"beta2", o.beta2},
                     {"weight_decay", o.weight_decay},
                     {"iterations", o.iterations},
                     {"batch_size", o.batch_size}};
}

void from_json(const nlohmann::json& j, OptimSection& o) {
  OptimSection def;
  o.lr = j.value("lr", def.lr);
  o.beta1 = j.value("beta1", def.beta1);
  o.beta2 = j.value("beta2", def.beta2);
  o.weight_decay = j.value("weight_decay", def.weight_decay);
  o.iterations = j.value("iterations", def.iterations);
  o.batch_size = j.value("batch_size", def.batch_size);
}

void to_json(nlohmann::json& j, const RunConfig& cfg) {
  j = nlohmann::json{{"data", cfg.data},
                     {"model", cfg.model},
                     {"optim", cfg.optim},
                     {"prioritization", cfg.prioritization},
                     {"tasks", to_string(cfg.tasks)},
                     {"seed", cfg.seed},
                     {"output_dir", cfg.output_dir},
                     {"lambda_size", cfg.lambda_size},
                     {"max_det", cfg.max_det}};
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
  RunConfig def;
  cfg.data = j.value("data", def.data);
  cfg.model = j.value("model", def.model);
  cfg.optim = j.value("optim", def.optim);
  cfg.prioritization = j.value("prioritization", def.prioritization);
  cfg.tasks = task_mode_from_string(j.value("tasks", to_string(def.tasks)));
  cfg.seed = j.value("seed", def.seed);
  cfg.output_dir = j.value("output_dir", def.output_dir);
  cfg.lambda_size = j.value("lambda_size", def.lambda_size);
  cfg.max_det = j.value("max_det", def.max_det);
}

void RunConfig::validate() const {
  model.validate();
  prioritization.validate();
  if (model.input_h != model.input_w) {
    throw std::invalid_argument("config: input must be square, got " +
                                std::to_string(model.input_h) + "x" + std::to_string(model.input_w));
  }
  if (!(optim.lr > 0.0) || !std::isfinite(optim.lr)) {
    throw std::invalid_argument("config: learning rate must be positive");
  }
  if (optim.beta1 < 0.0 || optim.beta1 >= 1.0 || optim.beta2 < 0.0 || optim.beta2 >= 1.0) {
    throw std::invalid_argument("config: betas must lie in [0,1)");
  }
  if (optim.weight_decay < 0.0) {
    throw std::invalid_argument("config: weight decay must be non-negative");
  }
  if (optim.iterations < 1) {
    throw std::invalid_argument("config: iterations must be at least 1");
  }
  if (optim.batch_size < 1) {
    throw std::invalid_argument("config: batch size must be at least 1");
  }
  if (!(lambda_size >= 0.0) || !std::isfinite(lambda_size)) {
    throw std::invalid_argument("config: lambda_size must be non-negative");
  }
  if (max_det < 1) {
    throw std::invalid_argument("config: max_det must be at least 1");
  }
  if (data.dir.empty()) {
    if (data.n_train < 1) {
      throw std::invalid_argument("config: generated datasets need n_train >= 1");
    }
    if (data.n_val < 0 || data.n_test < 0) {
      throw std::invalid_argument("config: split sizes must be non-negative");
    }
    if (data.generator.size != model.input_h) {
      throw std::invalid_argument("config: generator size " + std::to_string(data.generator.size) +
                                  " does not match model input " + std::to_string(model.input_h));
    }
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("cannot open config file: " + path);
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("cannot parse config file " + path + ": " + e.what());
  }
  RunConfig cfg = j.get<RunConfig>();
  cfg.validate();
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  RunConfig canon = cfg;
  canon.optim.iterations = 0;  // a resumed run may extend the horizon
  const std::string dump = nlohmann::json(canon).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

// Owns the records for a run; the split vectors point into `store`.
struct RunData {
  Dataset store;
  std::vector<const SampleRecord*> train, val, test;
};

RunData prepare_data(const RunConfig& cfg) {
  RunData out;
  if (!cfg.data.dir.empty()) {
    out.store = load_dataset(cfg.data.dir);
    if (out.store.records.empty()) {
      throw std::invalid_argument("data.dir has no samples: " + cfg.data.dir);
    }
    if (out.store.splits.train.empty() && out.store.splits.val.empty() &&
        out.store.splits.test.empty()) {
      std::vector<std::string> ids;
      for (const SampleRecord& r : out.store.records) ids.push_back(r.id);
      out.store.splits = split_by_hash(ids);
    }
    for (const SampleRecord& r : out.store.records) {
      if (r.size != cfg.model.input_h) {
        throw std::invalid_argument("dataset images are " + std::to_string(r.size) + "x" +
                                    std::to_string(r.size) + " but the model expects " +
                                    std::to_string(cfg.model.input_h) + "x" +
                                    std::to_string(cfg.model.input_w));
      }
    }
    out.train = out.store.split_records("train");
    out.val = out.store.split_records("val");
    out.test = out.store.split_records("test");
  } else {
    const int total = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
    out.store.generator = cfg.data.generator;
    out.store.size = cfg.data.generator.size;
    out.store.records.reserve(total);
    for (int i = 0; i < total; ++i) {
      SampleRecord rec = generate_sample(derive_seed(cfg.seed, "gen", i), cfg.data.generator);
      rec.id = sample_id(i);
      out.store.records.push_back(std::move(rec));
    }
    for (int i = 0; i < total; ++i) {
      const std::string& id = out.store.records[i].id;
      if (i < cfg.data.n_train) out.store.splits.train.push_back(id);
      else if (i < cfg.data.n_train + cfg.data.n_val) out.store.splits.val.push_back(id);
      else out.store.splits.test.push_back(id);
    }
    for (int i = 0; i < total; ++i) {
      const SampleRecord* r = &out.store.records[i];
      if (i < cfg.data.n_train) out.train.push_back(r);
      else if (i < cfg.data.n_train + cfg.data.n_val) out.val.push_back(r);
      else out.test.push_back(r);
    }
  }
  if (out.train.empty()) {
    throw std::invalid_argument("training split is empty");
  }
  return out;
}

struct Batch {
  std::vector<SampleRecord> records;  // augmented copies
  std::vector<std::int64_t> ids;      // train-split positions
  Tensor image, heatmap, size_map, center_mask, seg_mask;
};

Batch assemble_batch(const RunConfig& cfg, const std::vector<const SampleRecord*>& train,
                     std::int64_t iter) {
  const int b = cfg.optim.batch_size;
  const int s = cfg.model.input_h;
  const int gh = s / kHeadStride, gw = s / kHeadStride;
  Batch out;
  out.records.reserve(b);
  RngStream draw(derive_seed(cfg.seed, "batch", static_cast<std::uint64_t>(iter)));
  for (int k = 0; k < b; ++k) {
    const std::int64_t pos =
        static_cast<std::int64_t>(draw.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1));
    out.ids.push_back(pos);
    const SampleRecord& base = *train[static_cast<std::size_t>(pos)];
    if (cfg.data.augment) {
      out.records.push_back(augment(
          base, derive_seed(cfg.seed, "aug", static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(k)),
          cfg.data.augment_cfg));
    } else {
      out.records.push_back(base);
    }
  }

  const std::size_t px = static_cast<std::size_t>(s) * s;
  const std::size_t cells = static_cast<std::size_t>(gh) * gw;
  std::vector<double> img(b * px), seg(b * px);
  std::vector<double> heat(b * cells), sizes(b * 2 * cells), cmask(b * cells);
  for (int k = 0; k < b; ++k) {
    const SampleRecord& rec = out.records[static_cast<std::size_t>(k)];
    std::copy(rec.image.begin(), rec.image.end(), img.begin() + k * px);
    for (std::size_t i = 0; i < px; ++i) seg[k * px + i] = rec.mask[i] ? 1.0 : 0.0;
    const TargetBundle t = make_targets(rec, kHeadStride);
    std::copy(t.heatmap.begin(), t.heatmap.end(), heat.begin() + k * cells);
    std::copy(t.size_map.begin(), t.size_map.end(), sizes.begin() + k * 2 * cells);
    std::copy(t.center_mask.begin(), t.center_mask.end(), cmask.begin() + k * cells);
  }
  out.image = Tensor::from_data({b, 1, s, s}, std::move(img));
  out.seg_mask = Tensor::from_data({b, 1, s, s}, std::move(seg));
  out.heatmap = Tensor::from_data({b, 1, gh, gw}, std::move(heat));
  out.size_map = Tensor::from_data({b, 2, gh, gw}, std::move(sizes));
  out.center_mask = Tensor::from_data({b, 1, gh, gw}, std::move(cmask));
  return out;
}

std::vector<std::uint8_t> threshold_mask(const Tensor& seg_logits, int sample, int pixels) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(pixels));
  const double* base = seg_logits.data() + static_cast<std::size_t>(sample) * pixels;
  for (int i = 0; i < pixels; ++i) out[static_cast<std::size_t>(i)] = base[i] >= 0.0 ? 1 : 0;
  return out;
}

std::optional<double> batch_mean_kpi(const std::vector<double>& kpi,
                                     const std::vector<std::uint8_t>& avail) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < kpi.size(); ++i) {
    if (avail[i]) {
      acc += kpi[i];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / n;
}

// Once-per-epoch flags for the fixed_fraction strategy: the top ceil(rho*n)
// train samples by stored difficulty, unseen samples ranking hardest so the
// first epochs explore everything.
std::vector<std::uint8_t> epoch_flags(const KpiState& state, std::size_t n_train, double rho,
                                      bool seg_task) {
  std::vector<double> diff(n_train, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n_train; ++i) {
    const auto it = state.sample_difficulty.find(static_cast<std::int64_t>(i));
    if (it == state.sample_difficulty.end()) continue;
    const TaskDifficulty& t = seg_task ? it->second.seg : it->second.det;
    if (t.init) diff[i] = t.value;
  }
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&diff](std::size_t a, std::size_t b) {
    return diff[a] != diff[b] ? diff[a] > diff[b] : a < b;
  });
  const auto keep = static_cast<std::size_t>(std::min<double>(
      std::ceil(rho * static_cast<double>(n_train) - 1e-9), static_cast<double>(n_train)));
  std::vector<std::uint8_t> flags(n_train, 0);
  for (std::size_t r = 0; r < keep; ++r) flags[order[r]] = 1;
  return flags;
}

nlohmann::json flags_to_json(const std::vector<std::uint8_t>& flags) {
  nlohmann::json arr = nlohmann::json::array();
  for (const std::uint8_t f : flags) arr.push_back(static_cast<int>(f));
  return arr;
}

std::vector<std::uint8_t> flags_from_json(const nlohmann::json& arr, std::size_t n) {
  std::vector<std::uint8_t> out(n, 1);
  if (!arr.is_array() || arr.size() != n) return out;
  for (std::size_t i = 0; i < n; ++i) out[i] = arr[i].get<int>() ? 1 : 0;
  return out;
}

struct BestState {
  double kpi = -1.0;
  std::int64_t iteration = -1;
};

Checkpoint make_checkpoint(const MultiTaskNet& net, AdamW& opt, const KpiState& state,
                           std::int64_t next_iteration, const std::string& hash,
                           const BestState& best,
                           const std::vector<std::uint8_t>& epoch_d,
                           const std::vector<std::uint8_t>& epoch_s) {
  nlohmann::json extra;
  extra["iteration"] = next_iteration;
  extra["kpi_state"] = state;
  extra["config_hash"] = hash;
  extra["optim_steps"] = opt.steps();
  extra["best_val_kpi"] = best.kpi;
  extra["best_iteration"] = best.iteration;
  extra["epoch_selected_d"] = flags_to_json(epoch_d);
  extra["epoch_selected_s"] = flags_to_json(epoch_s);
  Checkpoint ckpt = net.to_checkpoint(std::move(extra));
  for (std::size_t i = 0; i < opt.size(); ++i) {
    char name[24];
    std::snprintf(name, sizeof(name), "opt.m.%04zu", i);
    ckpt.tensors.emplace_back(
        name, Tensor::from_data({static_cast<int>(opt.moment1(i).size())}, opt.moment1(i)));
    std::snprintf(name, sizeof(name), "opt.v.%04zu", i);
    ckpt.tensors.emplace_back(
        name, Tensor::from_data({static_cast<int>(opt.moment2(i).size())}, opt.moment2(i)));
  }
  return ckpt;
}

void restore_moments(AdamW& opt, const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < opt.size(); ++i) {
    char mname[24], vname[24];
    std::snprintf(mname, sizeof(mname), "opt.m.%04zu", i);
    std::snprintf(vname, sizeof(vname), "opt.v.%04zu", i);
    const Tensor* m = ckpt.find(mname);
    const Tensor* v = ckpt.find(vname);
    if (m == nullptr || v == nullptr) {
      throw std::runtime_error("checkpoint is missing optimizer state for parameter " +
                               std::to_string(i));
    }
    if (m->numel() != static_cast<std::int64_t>(opt.moment1(i).size()) ||
        v->numel() != static_cast<std::int64_t>(opt.moment2(i).size())) {
      throw std::runtime_error("checkpoint optimizer state has the wrong size for parameter " +
                               std::to_string(i));
    }
    std::copy(m->data(), m->data() + m->numel(), opt.moment1(i).begin());
    std::copy(v->data(), v->data() + v->numel(), opt.moment2(i).begin());
  }
}

}  // namespace

EvalReport evaluate(const MultiTaskNet& net, const std::vector<const SampleRecord*>& records,
                    int max_det) {
  if (records.empty()) {
    throw std::invalid_argument("evaluate: no samples given");
  }
  const NetworkConfig& nc = net.config();
  const int s = nc.input_h;
  const std::vector<double> thresholds = default_iou_thresholds();
  EvalReport report;
  double sum_ap = 0.0, sum_j = 0.0, sum_mae = 0.0, sum_rmse2 = 0.0;
  for (const SampleRecord* rec : records) {
    if (rec->size != nc.input_h || rec->size != nc.input_w) {
      throw std::invalid_argument("evaluate: dataset images are " + std::to_string(rec->size) +
                                  "x" + std::to_string(rec->size) + " but the network expects " +
                                  std::to_string(nc.input_h) + "x" + std::to_string(nc.input_w));
    }
    std::vector<double> img(rec->image);
    const Tensor x = Tensor::from_data({1, 1, s, s}, std::move(img));
    const NetworkOutput out = net.forward(x);
    const std::vector<Detection> dets =
        decode_detections(out.center_logits, out.size_pred, max_det, kHeadStride)[0];
    const std::vector<std::uint8_t> mask = threshold_mask(out.seg_logits, 0, s * s);

    PerSampleEval ps;
    ps.id = rec->id;
    ps.ap50 = average_precision({dets}, {rec->electrodes}, {0.5});
    ps.j = region_similarity(mask, rec->mask);
    const double diag = std::hypot(static_cast<double>(s), static_cast<double>(s));
    const LocErrors le = localization_errors(dets, rec->electrodes, diag);
    ps.mae = le.mae;
    ps.rmse = le.rmse;
    report.per_sample.push_back(ps);

    sum_ap += average_precision({dets}, {rec->electrodes}, thresholds);
    sum_j += ps.j;
    sum_mae += ps.mae;
    sum_rmse2 += ps.rmse * ps.rmse;
  }
  const double n = static_cast<double>(records.size());
  report.ap = sum_ap / n;
  report.mean_j = sum_j / n;
  report.mae_px = sum_mae / n;
  report.rmse_px = std::sqrt(sum_rmse2 / n);
  report.mean_kpi = 0.5 * (report.ap + report.mean_j);
  return report;
}

EvalReport evaluate_oracle(const std::vector<const SampleRecord*>& records) {
  if (records.empty()) {
    throw std::invalid_argument("evaluate: no samples given");
  }
  const std::vector<double> thresholds = default_iou_thresholds();
  EvalReport report;
  double sum_ap = 0.0, sum_j = 0.0;
  for (const SampleRecord* rec : records) {
    std::vector<Detection> dets;
    for (const ElectrodeBox& e : rec->electrodes) dets.push_back({e.cx, e.cy, e.w, e.h, 1.0});
    PerSampleEval ps;
    ps.id = rec->id;
    ps.ap50 = average_precision({dets}, {rec->electrodes}, {0.5});
    ps.j = region_similarity(rec->mask, rec->mask);
    ps.mae = 0.0;
    ps.rmse = 0.0;
    report.per_sample.push_back(ps);
    sum_ap += average_precision({dets}, {rec->electrodes}, thresholds);
    sum_j += ps.j;
  }
  const double n = static_cast<double>(records.size());
  report.ap = sum_ap / n;
  report.mean_j = sum_j / n;
  report.mae_px = 0.0;
  report.rmse_px = 0.0;
  report.mean_kpi = 0.5 * (report.ap + report.mean_j);
  return report;
}

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (opts.pinned_task_weights &&
      (!(opts.pinned_task_weights->first > 0.0) || !(opts.pinned_task_weights->second > 0.0))) {
    throw std::invalid_argument("train: pinned task weights must be positive");
  }
  RunData data = prepare_data(cfg);
  const std::string hash = config_hash(cfg);
  const std::size_t n_train = data.train.size();
  const bool det_on = cfg.tasks != TaskMode::kSegment;
  const bool seg_on = cfg.tasks != TaskMode::kDetect;
  const int s = cfg.model.input_h;
  const double diag = std::hypot(static_cast<double>(s), static_cast<double>(s));

  MultiTaskNet net = opts.resume_path.empty()
                         ? MultiTaskNet(cfg.model, derive_seed(cfg.seed, "init"))
                         : MultiTaskNet(cfg.model, 0);
  AdamWConfig acfg;
  acfg.lr = cfg.optim.lr;
  acfg.beta1 = cfg.optim.beta1;
  acfg.beta2 = cfg.optim.beta2;
  acfg.weight_decay = cfg.optim.weight_decay;

  KpiState state = KpiState::from_policy(cfg.prioritization);
  std::int64_t start_iter = 0;
  BestState best;
  std::vector<std::uint8_t> epoch_d(n_train, 1), epoch_s(n_train, 1);

  std::optional<AdamW> opt;
  if (!opts.resume_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(opts.resume_path);
    const std::string stored = ckpt.meta.value("config_hash", std::string());
    if (stored != hash) {
      throw std::runtime_error("checkpoint " + opts.resume_path +
                               " was written by a different config (hash " + stored + " vs " +
                               hash + ")");
    }
    net = MultiTaskNet::from_checkpoint(ckpt);
    opt.emplace(net.parameters(cfg.tasks), acfg);
    restore_moments(*opt, ckpt);
    opt->set_steps(ckpt.meta.value("optim_steps", std::int64_t{0}));
    state = ckpt.meta.value("kpi_state", state);
    start_iter = ckpt.meta.value("iteration", std::int64_t{0});
    best.kpi = ckpt.meta.value("best_val_kpi", -1.0);
    best.iteration = ckpt.meta.value("best_iteration", std::int64_t{-1});
    if (ckpt.meta.contains("epoch_selected_d")) {
      epoch_d = flags_from_json(ckpt.meta.at("epoch_selected_d"), n_train);
      epoch_s = flags_from_json(ckpt.meta.at("epoch_selected_s"), n_train);
    }
  } else {
    opt.emplace(net.parameters(cfg.tasks), acfg);
  }

  CurveRecorder curves;
  fs::path out_dir;
  if (!cfg.output_dir.empty()) {
    out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    std::vector<std::int64_t> tracked;
    for (std::int64_t i = 0; i < std::min<std::int64_t>(3, static_cast<std::int64_t>(n_train)); ++i) {
      tracked.push_back(i);
    }
    curves = CurveRecorder((out_dir / "difficulty_curves.csv").string(), std::move(tracked));
  }

  const bool fixed_fraction = cfg.prioritization.strategy == Strategy::kFixedFraction;
  const std::int64_t iters_per_epoch =
      std::max<std::int64_t>(1, (static_cast<std::int64_t>(n_train) + cfg.optim.batch_size - 1) /
                                    cfg.optim.batch_size);

  TrainResult result;
  result.skipped_iterations = 0;
  int consecutive_skips = 0;

  const auto run_validation = [&](std::int64_t iter) {
    if (data.val.empty()) return;
    const EvalReport vr = evaluate(net, data.val, cfg.max_det);
    const double score = cfg.tasks == TaskMode::kBoth
                             ? vr.mean_kpi
                             : (cfg.tasks == TaskMode::kDetect ? vr.ap : vr.mean_j);
    if (opts.verbose) {
      std::printf("iter %lld: val ap %.4f mean_j %.4f mean_kpi %.4f\n",
                  static_cast<long long>(iter + 1), vr.ap, vr.mean_j, vr.mean_kpi);
    }
    if (score > best.kpi) {
      best.kpi = score;
      best.iteration = iter + 1;
      if (!out_dir.empty()) {
        const Checkpoint ckpt =
            make_checkpoint(net, *opt, state, iter + 1, hash, best, epoch_d, epoch_s);
        result.best_checkpoint = (out_dir / "best.ckpt").string();
        save_checkpoint(result.best_checkpoint, ckpt);
      }
    }
  };

  for (std::int64_t iter = start_iter; iter < cfg.optim.iterations; ++iter) {
    if (fixed_fraction && iter % iters_per_epoch == 0) {
      // First epoch keeps everything (nothing has been scored yet); later
      // epochs keep the hardest rho fraction by the registry's difficulties.
      if (det_on) epoch_d = epoch_flags(state, n_train, cfg.prioritization.retention_rho, false);
      if (seg_on) epoch_s = epoch_flags(state, n_train, cfg.prioritization.retention_rho, true);
    }

    Batch batch = assemble_batch(cfg, data.train, iter);
    const int b = cfg.optim.batch_size;
    const int px = s * s;

    Tape tape;
    const NetworkOutput out = net.forward(batch.image);

    LossResult focal, size_loss, seg_loss;
    Tensor det_ps, seg_ps;
    if (det_on) {
      focal = focal_center_loss(out.center_logits, batch.heatmap, batch.center_mask);
      size_loss = size_l1_loss(out.size_pred, batch.size_map, batch.center_mask);
      det_ps = add(focal.per_sample, mul_scalar(size_loss.per_sample, cfg.lambda_size));
    }
    if (seg_on) {
      seg_loss = bce_iou_seg_loss(out.seg_logits, batch.seg_mask);
      seg_ps = seg_loss.per_sample;
    }

    // KPIs come from decoded predictions; a disabled task gets blank targets
    // so its availability is zero everywhere and its stats never move.
    std::vector<std::vector<Detection>> decoded;
    if (det_on) {
      decoded = decode_detections(out.center_logits, out.size_pred, cfg.max_det, kHeadStride);
    }
    std::vector<SamplePrediction> preds(static_cast<std::size_t>(b));
    std::vector<SampleTarget> targets(static_cast<std::size_t>(b));
    for (int k = 0; k < b; ++k) {
      const SampleRecord& rec = batch.records[static_cast<std::size_t>(k)];
      SamplePrediction& p = preds[static_cast<std::size_t>(k)];
      SampleTarget& t = targets[static_cast<std::size_t>(k)];
      t.diag_px = diag;
      if (det_on) {
        p.detections = decoded[static_cast<std::size_t>(k)];
        p.focal_loss = focal.per_sample.data()[k];
        t.electrodes = rec.electrodes;
      }
      if (seg_on) {
        p.mask = threshold_mask(out.seg_logits, k, px);
        p.ce_loss = seg_loss.per_sample.data()[k];
        t.mask = rec.mask;
      }
    }
    const SampleKpis kpis = compute_sample_kpis(preds, targets, cfg.prioritization);

    ema_update(state, batch_mean_kpi(kpis.kpi_d, kpis.avail_d),
               batch_mean_kpi(kpis.kpi_s, kpis.avail_s));

    const BatchDifficulty diff = batch_difficulties(state, batch.ids, kpis);
    std::vector<double> delta_d(static_cast<std::size_t>(b), 0.0);
    std::vector<double> delta_s(static_cast<std::size_t>(b), 0.0);
    std::vector<std::uint8_t> batch_epoch_d, batch_epoch_s;
    if (fixed_fraction) {
      for (const std::int64_t id : batch.ids) {
        batch_epoch_d.push_back(epoch_d[static_cast<std::size_t>(id)]);
        batch_epoch_s.push_back(epoch_s[static_cast<std::size_t>(id)]);
      }
    }
    if (det_on) {
      delta_d = select_samples(diff.det, kpis.avail_d, cfg.prioritization, &batch.ids,
                               fixed_fraction ? &batch_epoch_d : nullptr)
                    .delta;
    }
    if (seg_on) {
      delta_s = select_samples(diff.seg, kpis.avail_s, cfg.prioritization, &batch.ids,
                               fixed_fraction ? &batch_epoch_s : nullptr)
                    .delta;
    }

    Tensor loss_d, loss_s;
    bool finite = true;
    if (det_on) {
      loss_d = masked_task_loss(det_ps, delta_d);
      finite = finite && std::isfinite(loss_d.data()[0]);
    }
    if (seg_on) {
      loss_s = masked_task_loss(seg_ps, delta_s);
      finite = finite && std::isfinite(loss_s.data()[0]);
    }
    if (!finite) {
      ++result.skipped_iterations;
      ++consecutive_skips;
      std::fprintf(stderr, "warning: non-finite loss at iteration %lld; skipping (%d in a row)\n",
                   static_cast<long long>(iter + 1), consecutive_skips);
      if (consecutive_skips >= kMaxConsecutiveSkips) {
        throw std::runtime_error("training aborted: " + std::to_string(consecutive_skips) +
                                 " consecutive non-finite iterations");
      }
      opt->zero_grad();
      continue;
    }
    consecutive_skips = 0;

    Tensor total;
    if (det_on && seg_on) {
      if (opts.pinned_task_weights) {
        total = combine_losses(loss_d, loss_s, 1.0 / opts.pinned_task_weights->first,
                               1.0 / opts.pinned_task_weights->second, /*eps_w=*/0.0);
      } else {
        total =
            combine_losses(loss_d, loss_s, state.kpi_bar_d, state.kpi_bar_s, state.eps_floor);
      }
    } else {
      const Tensor& active = det_on ? loss_d : loss_s;
      if (opts.pinned_task_weights) {
        total = mul_scalar(active, det_on ? opts.pinned_task_weights->first
                                          : opts.pinned_task_weights->second);
      } else {
        total = active;
      }
    }
    result.loss_history.push_back(total.data()[0]);

    tape.backward(total);
    opt->step();
    opt->zero_grad();

    update_sample_difficulties(state, batch.ids, kpis, delta_d, delta_s);
    record_difficulty_curves(state, curves);

    if ((iter + 1) % kValidateEvery == 0 || iter + 1 == cfg.optim.iterations) {
      run_validation(iter);
    }
  }

  if (!out_dir.empty()) {
    const Checkpoint last =
        make_checkpoint(net, *opt, state, cfg.optim.iterations, hash, best, epoch_d, epoch_s);
    result.last_checkpoint = (out_dir / "last.ckpt").string();
    save_checkpoint(result.last_checkpoint, last);
  }

  if (!data.test.empty()) {
    result.test_report = evaluate(net, data.test, cfg.max_det);
    if (!out_dir.empty()) {
      write_report_json((out_dir / "report.json").string(), result.test_report);
      write_per_sample_csv((out_dir / "per_sample.csv").string(), result.test_report);
    }
  }
  result.kpi_state = state;
  result.best_val_kpi = best.kpi;
  result.best_iteration = best.iteration;
  return result;
}

void gen_data(const GeneratorConfig& cfg, int n, const std::string& out_dir, std::uint64_t seed,
              bool force) {
  if (n < 1) {
    throw std::invalid_argument("gen-data: n must be at least 1");
  }
  const fs::path root(out_dir);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) {
      throw std::runtime_error("gen-data: '" + out_dir +
                               "' is not empty; pass --force to overwrite");
    }
    // Only the dataset's own entries are replaced; unrelated files survive.
    for (const char* sub : {"images", "masks", "annotations"}) {
      fs::remove_all(root / sub);
    }
    fs::remove(root / "manifest.json");
    fs::remove(root / "splits.json");
  }
  std::vector<SampleRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SampleRecord rec = generate_sample(derive_seed(seed, "gen", static_cast<std::uint64_t>(i)), cfg);
    rec.id = sample_id(i);
    records.push_back(std::move(rec));
  }
  save_dataset(out_dir, records, cfg);
}

}  // namespace fluorotask
