#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <string>

#include "fluorotask/trainer.hpp"

namespace {

constexpr const char* kUsage = R"(fluorotask -- multi-task electrode detection / catheter segmentation

usage:
  fluorotask train --config <file> [--resume <ckpt>]
  fluorotask eval --ckpt <file> --data <dir> [--split <train|val|test|all>]
  fluorotask gen-data --out <dir> --n <int> --seed <int> [--force]
  fluorotask ablate --config <file> --axis <name> [--seeds <int>]

commands:
  train     run the training loop described by a JSON config; artifacts
            (report.json, per_sample.csv, difficulty_curves.csv, best.ckpt,
            last.ckpt) land in the config's output_dir
  eval      score a checkpoint against a dataset directory and print the
            report JSON to stdout
  gen-data  write a synthetic dataset (images/, masks/, annotations/,
            manifest.json, splits.json) to --out
  ablate    train every variant of --axis (task_weight | kpi_metric |
            strategy | backbone_scale) over consecutive seeds and write
            ablation_<axis>.csv / .txt to the config's output_dir

configs are JSON; see configs/desk64.json for the annotated schema.
)";

struct Args {
  std::string command;
  std::string config;
  std::string resume;
  std::string ckpt;
  std::string data;
  std::string split = "test";
  std::string out;
  std::string axis;
  long long n = -1;
  unsigned long long seed = 0;
  bool seed_set = false;
  bool force = false;
  int seeds = 5;
};

bool parse_args(int argc, char** argv, Args& args, std::string& error) {
  args.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    const std::string flag = argv[i];
    const auto need_value = [&](const char* name) -> const char* {
      if (i + 1 >= argc) {
        error = std::string(name) + " needs a value";
        return nullptr;
      }
      return argv[++i];
    };
    if (flag == "--config") {
      const char* v = need_value("--config");
      if (!v) return false;
      args.config = v;
    } else if (flag == "--resume") {
      const char* v = need_value("--resume");
      if (!v) return false;
      args.resume = v;
    } else if (flag == "--ckpt") {
      const char* v = need_value("--ckpt");
      if (!v) return false;
      args.ckpt = v;
    } else if (flag == "--data") {
      const char* v = need_value("--data");
      if (!v) return false;
      args.data = v;
    } else if (flag == "--split") {
      const char* v = need_value("--split");
      if (!v) return false;
      args.split = v;
    } else if (flag == "--out") {
      const char* v = need_value("--out");
      if (!v) return false;
      args.out = v;
    } else if (flag == "--axis") {
      const char* v = need_value("--axis");
      if (!v) return false;
      args.axis = v;
    } else if (flag == "--n") {
      const char* v = need_value("--n");
      if (!v) return false;
      args.n = std::strtoll(v, nullptr, 10);
    } else if (flag == "--seed") {
      const char* v = need_value("--seed");
      if (!v) return false;
      args.seed = std::strtoull(v, nullptr, 10);
      args.seed_set = true;
    } else if (flag == "--seeds") {
      const char* v = need_value("--seeds");
      if (!v) return false;
      args.seeds = static_cast<int>(std::strtol(v, nullptr, 10));
    } else if (flag == "--force") {
      args.force = true;
    } else {
      error = "unknown flag '" + flag + "'";
      return false;
    }
  }
  return true;
}

int cmd_train(const Args& args) {
  if (args.config.empty()) {
    std::fprintf(stderr, "train: --config is required\n");
    return 2;
  }
  const fluorotask::RunConfig cfg = fluorotask::load_run_config(args.config);
  fluorotask::TrainOptions opts;
  opts.resume_path = args.resume;
  opts.verbose = true;
  const fluorotask::TrainResult result = fluorotask::train(cfg, opts);
  std::printf("trained %zu iterations (%d skipped)\n", result.loss_history.size(),
              result.skipped_iterations);
  if (!result.last_checkpoint.empty()) {
    std::printf("last checkpoint: %s\n", result.last_checkpoint.c_str());
  }
  if (!result.best_checkpoint.empty()) {
    std::printf("best checkpoint: %s (val score %.4f at iteration %lld)\n",
                result.best_checkpoint.c_str(), result.best_val_kpi,
                static_cast<long long>(result.best_iteration));
  }
  if (!result.test_report.per_sample.empty()) {
    std::printf("test: AP %.2f  mean J %.2f  mean KPI %.2f\n", 100.0 * result.test_report.ap,
                100.0 * result.test_report.mean_j, 100.0 * result.test_report.mean_kpi);
  }
  return 0;
}

int cmd_eval(const Args& args) {
  if (args.ckpt.empty() || args.data.empty()) {
    std::fprintf(stderr, "eval: --ckpt and --data are required\n");
    return 2;
  }
  const fluorotask::Checkpoint ckpt = fluorotask::load_checkpoint(args.ckpt);
  const fluorotask::MultiTaskNet net = fluorotask::MultiTaskNet::from_checkpoint(ckpt);
  fluorotask::Dataset ds = fluorotask::load_dataset(args.data);
  if (ds.records.empty()) {
    std::fprintf(stderr, "eval: no samples in %s\n", args.data.c_str());
    return 1;
  }
  std::vector<const fluorotask::SampleRecord*> records;
  if (args.split == "all") {
    for (const fluorotask::SampleRecord& r : ds.records) records.push_back(&r);
  } else {
    records = ds.split_records(args.split);
  }
  const fluorotask::EvalReport report = fluorotask::evaluate(net, records);
  std::printf("{\n  \"split\": \"%s\",\n  \"ap\": %.2f,\n  \"mean_j\": %.2f,\n", args.split.c_str(),
              100.0 * report.ap, 100.0 * report.mean_j);
  std::printf("  \"mae_px\": %.2f,\n  \"rmse_px\": %.2f,\n  \"mean_kpi\": %.2f,\n", report.mae_px,
              report.rmse_px, 100.0 * report.mean_kpi);
  std::printf("  \"n_samples\": %zu\n}\n", report.per_sample.size());
  return 0;
}

int cmd_gen_data(const Args& args) {
  if (args.out.empty() || args.n < 1 || !args.seed_set) {
    std::fprintf(stderr, "gen-data: --out, --n and --seed are required\n");
    return 2;
  }
  fluorotask::GeneratorConfig cfg;  // desk-scale 64x64 defaults
  fluorotask::gen_data(cfg, static_cast<int>(args.n), args.out, args.seed, args.force);
  std::printf("wrote %lld samples to %s\n", args.n, args.out.c_str());
  return 0;
}

int cmd_ablate(const Args& args) {
  if (args.config.empty() || args.axis.empty()) {
    std::fprintf(stderr, "ablate: --config and --axis are required\n");
    return 2;
  }
  const fluorotask::RunConfig base = fluorotask::load_run_config(args.config);
  const std::string out_dir = base.output_dir.empty() ? "." : base.output_dir;
  const std::vector<fluorotask::AblationRow> rows =
      fluorotask::ablate(base, args.axis, args.seeds, out_dir);
  std::printf("%-20s %10s %10s %10s\n", args.axis.c_str(), "AP", "mean J", "mean KPI");
  for (const fluorotask::AblationRow& row : rows) {
    if (row.failed) {
      std::printf("%-20s %10s %10s %10s\n", row.variant.c_str(), "FAILED", "FAILED", "FAILED");
      continue;
    }
    double ap = 0.0, mj = 0.0, mk = 0.0;
    for (std::size_t k = 0; k < row.ap.size(); ++k) {
      ap += row.ap[k];
      mj += row.mean_j[k];
      mk += row.mean_kpi[k];
    }
    const double n = static_cast<double>(row.ap.size());
    std::printf("%-20s %10.3f %10.3f %10.3f\n", row.variant.c_str(), ap / n, mj / n, mk / n);
  }
  std::printf("tables written to %s/ablation_%s.{csv,txt}\n", out_dir.c_str(), args.axis.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fputs(kUsage, stderr);
    return 2;
  }
  Args args;
  std::string error;
  if (!parse_args(argc, argv, args, error)) {
    std::fprintf(stderr, "error: %s\n\n%s", error.c_str(), kUsage);
    return 2;
  }
  try {
    if (args.command == "train") return cmd_train(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "gen-data") return cmd_gen_data(args);
    if (args.command == "ablate") return cmd_ablate(args);
    if (args.command == "help" || args.command == "--help" || args.command == "-h") {
      std::fputs(kUsage, stdout);
      return 0;
    }
    std::fprintf(stderr, "unknown command '%s'\n\n%s", args.command.c_str(), kUsage);
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
