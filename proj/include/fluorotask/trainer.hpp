#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fluorotask/checkpoint.hpp"
#include "fluorotask/dataset.hpp"
#include "fluorotask/metrics.hpp"
#include "fluorotask/model.hpp"
#include "fluorotask/prioritizer.hpp"
#include "fluorotask/synth.hpp"

namespace fluorotask {

// Where samples come from: a dataset directory written by gen-data, or --
// when `dir` is empty -- images generated in memory from the run seed with
// the requested split sizes.
struct DataSection {
  std::string dir;
  GeneratorConfig generator;
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  bool augment = true;
  AugmentConfig augment_cfg;
};

void to_json(nlohmann::json& j, const DataSection& d);
void from_json(const nlohmann::json& j, DataSection& d);

struct OptimSection {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  int iterations = 2000;
  int batch_size = 8;
};

void to_json(nlohmann::json& j, const OptimSection& o);
void from_json(const nlohmann::json& j, OptimSection& o);

// One self-describing document with nested sections; see configs/ for
// annotated examples. `output_dir` empty means no artifacts are written.
struct RunConfig {
  DataSection data;
  NetworkConfig model;
  OptimSection optim;
  PrioritizationPolicy prioritization;
  TaskMode tasks = TaskMode::kBoth;
  std::uint64_t seed = 17;
  std::string output_dir;
  double lambda_size = 1.0;  // weight of the size term inside the detection loss
  int max_det = 8;           // decode cap used for KPIs and evaluation

  void validate() const;  // throws std::invalid_argument
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

RunConfig load_run_config(const std::string& path);

// FNV-1a over the canonical serialization minus the iteration budget, so a
// resumed run may extend the horizon but nothing else.
std::string config_hash(const RunConfig& cfg);

struct TrainOptions {
  std::string resume_path;
  // Fixed (w_d, w_s) replacing the inverse-KPI weights; used by the
  // constant-weight ablation rows and the unweighted baseline.
  std::optional<std::pair<double, double>> pinned_task_weights;
  bool verbose = false;
};

struct TrainResult {
  std::vector<double> loss_history;  // total loss of every executed iteration
  EvalReport test_report;            // empty test split leaves this default
  KpiState kpi_state;
  double best_val_kpi = -1.0;
  std::int64_t best_iteration = -1;
  std::string best_checkpoint;  // paths are empty without an output_dir
  std::string last_checkpoint;
  int skipped_iterations = 0;
};

TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

// Full metric report over `records`; batch size 1, no augmentation.
EvalReport evaluate(const MultiTaskNet& net, const std::vector<const SampleRecord*>& records,
                    int max_det = 8);

// Feeds each record's own ground truth back as its prediction; the upper
// bound every metric should saturate.
EvalReport evaluate_oracle(const std::vector<const SampleRecord*>& records);

// Generates n samples and writes a dataset directory (images, masks,
// annotations, manifest, hash splits). Refuses a non-empty target unless
// `force`.
void gen_data(const GeneratorConfig& cfg, int n, const std::string& out_dir, std::uint64_t seed,
              bool force);

struct AblationRow {
  std::string variant;
  bool failed = false;
  std::vector<double> ap;        // one entry per seed
  std::vector<double> mean_j;
  std::vector<double> mean_kpi;
};

// Trains every variant of `axis` over n_seeds consecutive seeds and returns
// one row per variant. When out_dir is non-empty the table is also written
// as ablation_<axis>.csv plus a human-readable .txt next to it.
std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis, int n_seeds = 5,
                                const std::string& out_dir = "");

// Axis -> variant names, as emitted by ablate (row order preserved).
std::vector<std::string> ablation_variants(const std::string& axis);

}  // namespace fluorotask
