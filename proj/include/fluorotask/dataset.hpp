#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "fluorotask/synth.hpp"

namespace fluorotask {

inline constexpr int kDatasetVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  enum class Kind { kVersionMismatch, kMissingFile, kShapeMismatch, kParse };
  DatasetError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind(kind) {}
  Kind kind;
};

struct SplitIds {
  std::vector<std::string> train, val, test;
};

// Deterministic 70/15/15 split: ids ordered by a seed-free hash, then sliced
// by rounded prefix counts (100 samples → exactly 70/15/15).
SplitIds split_by_hash(std::vector<std::string> ids);

// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               int width, int height);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height);

struct Dataset {
  GeneratorConfig generator;
  int size = 0;
  std::vector<SampleRecord> records;  // ordered by id
  SplitIds splits;

  const SampleRecord* find(const std::string& id) const;
  std::vector<const SampleRecord*> split_records(const std::string& which) const;
};

// Writes images/, masks/, annotations/, manifest.json and splits.json.
void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records,
                  const GeneratorConfig& cfg);

// Loads a dataset directory; an empty/absent directory yields an empty
// Dataset. Schema-version mismatches, missing companion files and image/mask
// shape disagreements raise DatasetError naming the offending file.
Dataset load_dataset(const std::string& dir);

}  // namespace fluorotask
