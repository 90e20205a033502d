#include "fluorotask/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fluorotask {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are stored as little-endian doubles");

namespace {

constexpr char kMagic[8] = {'F', 'T', 'C', 'K', 'P', 'T', '\0', '\0'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put(os, ckpt.version);
  const std::string meta = ckpt.meta.dump();
  put(os, static_cast<std::uint64_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) put(os, static_cast<std::int64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  Checkpoint ckpt;
  ckpt.version = get<std::uint32_t>(is, path);
  if (ckpt.version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(ckpt.version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) +
                             "): " + path);
  }
  const auto meta_size = get<std::uint64_t>(is, path);
  std::string meta(meta_size, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_size));
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  ckpt.meta = nlohmann::json::parse(meta);
  const auto count = get<std::uint32_t>(is, path);
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get<std::int64_t>(is, path));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated: " + path);
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace fluorotask
