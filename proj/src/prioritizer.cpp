#include "fluorotask/prioritizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "fluorotask/ops.hpp"

namespace fluorotask {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

bool any_set(const std::vector<std::uint8_t>& m) {
  return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
}

// Count kept by the ranked strategies; the tiny slack keeps an exact
// fraction-of-n product from rounding up across an integer boundary.
std::size_t retained_count(double rho, std::size_t n_avail) {
  const double k = std::ceil(rho * static_cast<double>(n_avail) - 1e-9);
  return std::min(static_cast<std::size_t>(std::max(k, 0.0)), n_avail);
}

}  // namespace

Strategy strategy_from_string(const std::string& s) {
  if (s == "soft") return Strategy::kSoft;
  if (s == "hard_threshold") return Strategy::kHardThreshold;
  if (s == "fixed_fraction") return Strategy::kFixedFraction;
  if (s == "topk_soft") return Strategy::kTopkSoft;
  if (s == "topk_hard") return Strategy::kTopkHard;
  throw std::invalid_argument("unknown selection strategy: " + s);
}

std::string strategy_to_string(Strategy s) {
  switch (s) {
    case Strategy::kSoft: return "soft";
    case Strategy::kHardThreshold: return "hard_threshold";
    case Strategy::kFixedFraction: return "fixed_fraction";
    case Strategy::kTopkSoft: return "topk_soft";
    case Strategy::kTopkHard: return "topk_hard";
  }
  throw std::logic_error("unreachable strategy");
}

DetKpiMetric det_kpi_metric_from_string(const std::string& s) {
  if (s == "mae") return DetKpiMetric::kMae;
  if (s == "rmse") return DetKpiMetric::kRmse;
  if (s == "focal_loss") return DetKpiMetric::kFocalLossBased;
  throw std::invalid_argument("unknown detection KPI metric: " + s);
}

std::string det_kpi_metric_to_string(DetKpiMetric m) {
  switch (m) {
    case DetKpiMetric::kMae: return "mae";
    case DetKpiMetric::kRmse: return "rmse";
    case DetKpiMetric::kFocalLossBased: return "focal_loss";
  }
  throw std::logic_error("unreachable detection metric");
}

SegKpiMetric seg_kpi_metric_from_string(const std::string& s) {
  if (s == "iou") return SegKpiMetric::kIou;
  if (s == "dice") return SegKpiMetric::kDice;
  if (s == "ce") return SegKpiMetric::kCeBased;
  throw std::invalid_argument("unknown segmentation KPI metric: " + s);
}

std::string seg_kpi_metric_to_string(SegKpiMetric m) {
  switch (m) {
    case SegKpiMetric::kIou: return "iou";
    case SegKpiMetric::kDice: return "dice";
    case SegKpiMetric::kCeBased: return "ce";
  }
  throw std::logic_error("unreachable segmentation metric");
}

void PrioritizationPolicy::validate() const {
  if (!(retention_rho > 0.0 && retention_rho <= 1.0)) {
    throw std::invalid_argument("policy: retention_rho must be in (0, 1], got " +
                                std::to_string(retention_rho));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("policy: alpha must be in [0, 1], got " +
                                std::to_string(alpha));
  }
  if (!(eps_floor > 0.0 && eps_floor < 1.0)) {
    throw std::invalid_argument("policy: eps_floor must be in (0, 1), got " +
                                std::to_string(eps_floor));
  }
  if (!std::isfinite(threshold_eta)) {
    throw std::invalid_argument("policy: threshold_eta must be finite");
  }
}

void to_json(nlohmann::json& j, const PrioritizationPolicy& p) {
  j = nlohmann::json{{"strategy", strategy_to_string(p.strategy)},
                     {"retention_rho", p.retention_rho},
                     {"threshold_eta", p.threshold_eta},
                     {"alpha", p.alpha},
                     {"kpi_metric_d", det_kpi_metric_to_string(p.kpi_metric_d)},
                     {"kpi_metric_s", seg_kpi_metric_to_string(p.kpi_metric_s)},
                     {"eps_floor", p.eps_floor},
                     {"difficulty_momentum", p.difficulty_momentum}};
}

void from_json(const nlohmann::json& j, PrioritizationPolicy& p) {
  PrioritizationPolicy d;
  p.strategy = strategy_from_string(j.value("strategy", strategy_to_string(d.strategy)));
  p.retention_rho = j.value("retention_rho", d.retention_rho);
  p.threshold_eta = j.value("threshold_eta", d.threshold_eta);
  p.alpha = j.value("alpha", d.alpha);
  p.kpi_metric_d =
      det_kpi_metric_from_string(j.value("kpi_metric_d", det_kpi_metric_to_string(d.kpi_metric_d)));
  p.kpi_metric_s =
      seg_kpi_metric_from_string(j.value("kpi_metric_s", seg_kpi_metric_to_string(d.kpi_metric_s)));
  p.eps_floor = j.value("eps_floor", d.eps_floor);
  p.difficulty_momentum = j.value("difficulty_momentum", d.difficulty_momentum);
}

SampleKpis compute_sample_kpis(const std::vector<SamplePrediction>& preds,
                               const std::vector<SampleTarget>& targets,
                               const PrioritizationPolicy& policy) {
  policy.validate();
  if (preds.size() != targets.size()) {
    throw std::invalid_argument("compute_sample_kpis: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(targets.size()) +
                                " targets");
  }
  const std::size_t n = preds.size();
  SampleKpis out;
  out.kpi_d.assign(n, 0.0);
  out.kpi_s.assign(n, 0.0);
  out.avail_d.assign(n, 0);
  out.avail_s.assign(n, 0);

  for (std::size_t i = 0; i < n; ++i) {
    const SamplePrediction& p = preds[i];
    const SampleTarget& t = targets[i];

    if (!t.electrodes.empty()) {
      double kappa = 0.0;
      if (policy.kpi_metric_d == DetKpiMetric::kFocalLossBased) {
        kappa = 1.0 / (1.0 + std::max(p.focal_loss, 0.0));
      } else {
        if (!(t.diag_px > 0.0)) {
          throw std::invalid_argument("compute_sample_kpis: sample " + std::to_string(i) +
                                      " needs a positive image diagonal");
        }
        const LocErrors e = localization_errors(p.detections, t.electrodes, t.diag_px);
        const double err = policy.kpi_metric_d == DetKpiMetric::kMae ? e.mae : e.rmse;
        kappa = 1.0 / (1.0 + err / (0.05 * t.diag_px));
      }
      if (std::isfinite(kappa)) {
        out.kpi_d[i] = clamp01(kappa);
        out.avail_d[i] = 1;
      }
    }

    if (any_set(t.mask)) {
      double kappa = 0.0;
      switch (policy.kpi_metric_s) {
        case SegKpiMetric::kIou: kappa = region_similarity(p.mask, t.mask); break;
        case SegKpiMetric::kDice: kappa = dice(p.mask, t.mask); break;
        case SegKpiMetric::kCeBased: kappa = 1.0 / (1.0 + std::max(p.ce_loss, 0.0)); break;
      }
      if (std::isfinite(kappa)) {
        out.kpi_s[i] = clamp01(kappa);
        out.avail_s[i] = 1;
      }
    }
  }
  return out;
}

KpiState KpiState::from_policy(const PrioritizationPolicy& policy) {
  policy.validate();
  KpiState s;
  s.alpha = policy.alpha;
  s.eps_floor = policy.eps_floor;
  s.difficulty_momentum = policy.difficulty_momentum;
  return s;
}

namespace {

nlohmann::json task_to_json(const TaskDifficulty& t) {
  return nlohmann::json{{"value", t.value}, {"init", t.init}, {"selected", t.selected != 0}};
}

TaskDifficulty task_from_json(const nlohmann::json& j) {
  TaskDifficulty t;
  t.value = j.value("value", 0.0);
  t.init = j.value("init", false);
  t.selected = j.value("selected", false) ? 1 : 0;
  return t;
}

}  // namespace

void to_json(nlohmann::json& j, const KpiState& s) {
  nlohmann::json reg = nlohmann::json::array();
  for (const auto& [id, diff] : s.sample_difficulty) {
    reg.push_back(nlohmann::json{
        {"id", id}, {"d", task_to_json(diff.det)}, {"s", task_to_json(diff.seg)}});
  }
  j = nlohmann::json{{"alpha", s.alpha},
                     {"eps_floor", s.eps_floor},
                     {"kpi_bar_d", s.kpi_bar_d},
                     {"kpi_bar_s", s.kpi_bar_s},
                     {"init_d", s.init_d},
                     {"init_s", s.init_s},
                     {"tau", s.tau},
                     {"difficulty_momentum", s.difficulty_momentum},
                     {"sample_difficulty", std::move(reg)}};
}

void from_json(const nlohmann::json& j, KpiState& s) {
  KpiState d;
  s.alpha = j.value("alpha", d.alpha);
  s.eps_floor = j.value("eps_floor", d.eps_floor);
  s.kpi_bar_d = j.value("kpi_bar_d", d.kpi_bar_d);
  s.kpi_bar_s = j.value("kpi_bar_s", d.kpi_bar_s);
  s.init_d = j.value("init_d", d.init_d);
  s.init_s = j.value("init_s", d.init_s);
  s.tau = j.value("tau", d.tau);
  s.difficulty_momentum = j.value("difficulty_momentum", d.difficulty_momentum);
  s.sample_difficulty.clear();
  if (j.contains("sample_difficulty")) {
    for (const nlohmann::json& e : j.at("sample_difficulty")) {
      SampleDifficulty diff;
      diff.det = task_from_json(e.at("d"));
      diff.seg = task_from_json(e.at("s"));
      s.sample_difficulty[e.at("id").get<std::int64_t>()] = diff;
    }
  }
}

void ema_update(KpiState& state, std::optional<double> kpi_d, std::optional<double> kpi_s) {
  const auto step = [&state](double kpi, double bar, bool init) {
    if (!(kpi >= 0.0 && kpi <= 1.0)) {
      throw std::invalid_argument("ema_update: KPI must be in [0, 1], got " +
                                  std::to_string(kpi));
    }
    const double next = init ? state.alpha * kpi + (1.0 - state.alpha) * bar : kpi;
    return std::max(next, state.eps_floor);
  };
  if (kpi_d.has_value()) {
    state.kpi_bar_d = step(*kpi_d, state.kpi_bar_d, state.init_d);
    state.init_d = true;
  }
  if (kpi_s.has_value()) {
    state.kpi_bar_s = step(*kpi_s, state.kpi_bar_s, state.init_s);
    state.init_s = true;
  }
  ++state.tau;
}

SelectionResult select_samples(const std::vector<double>& difficulty,
                               const std::vector<std::uint8_t>& available,
                               const PrioritizationPolicy& policy,
                               const std::vector<std::int64_t>* sample_ids,
                               const std::vector<std::uint8_t>* epoch_selected) {
  policy.validate();
  const std::size_t n = difficulty.size();
  if (available.size() != n) {
    throw std::invalid_argument("select_samples: " + std::to_string(n) +
                                " difficulties vs " + std::to_string(available.size()) +
                                " availability flags");
  }
  if (sample_ids != nullptr && sample_ids->size() != n) {
    throw std::invalid_argument("select_samples: sample id list has wrong length");
  }
  for (const double d : difficulty) {
    if (!std::isfinite(d) || d < 0.0) {
      throw std::invalid_argument("select_samples: difficulties must be finite and >= 0");
    }
  }

  SelectionResult res;
  res.delta.assign(n, 0.0);
  std::vector<std::size_t> avail;
  for (std::size_t i = 0; i < n; ++i) {
    if (available[i]) avail.push_back(i);
  }
  if (avail.empty()) {
    res.skipped = true;
    return res;
  }

  double max_d = 0.0;
  for (const std::size_t i : avail) max_d = std::max(max_d, difficulty[i]);
  // All-zero difficulties carry no ranking signal: soft weights fall back to
  // uniform full weight.
  const auto soft_weight = [&](std::size_t i) {
    return max_d > 0.0 ? difficulty[i] / max_d : 1.0;
  };
  const auto id_of = [&](std::size_t i) {
    return sample_ids != nullptr ? (*sample_ids)[i] : static_cast<std::int64_t>(i);
  };

  switch (policy.strategy) {
    case Strategy::kSoft:
      for (const std::size_t i : avail) res.delta[i] = soft_weight(i);
      break;
    case Strategy::kHardThreshold:
      for (const std::size_t i : avail) {
        res.delta[i] = soft_weight(i) > policy.threshold_eta ? 1.0 : 0.0;
      }
      break;
    case Strategy::kFixedFraction:
      if (epoch_selected == nullptr || epoch_selected->size() != n) {
        throw std::invalid_argument(
            "select_samples: fixed_fraction needs per-epoch selection flags");
      }
      for (const std::size_t i : avail) {
        res.delta[i] = (*epoch_selected)[i] ? 1.0 : 0.0;
      }
      break;
    case Strategy::kTopkSoft:
    case Strategy::kTopkHard: {
      std::vector<std::size_t> order = avail;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (difficulty[a] != difficulty[b]) return difficulty[a] > difficulty[b];
        return id_of(a) < id_of(b);
      });
      const std::size_t keep = retained_count(policy.retention_rho, avail.size());
      for (std::size_t k = 0; k < keep; ++k) {
        const std::size_t i = order[k];
        res.delta[i] = policy.strategy == Strategy::kTopkHard ? 1.0 : soft_weight(i);
      }
      break;
    }
  }
  return res;
}

Tensor masked_task_loss(const Tensor& per_sample_losses, const std::vector<double>& delta) {
  for (const double d : delta) {
    if (!std::isfinite(d) || d < 0.0 || d > 1.0) {
      throw std::invalid_argument("masked_task_loss: weights must lie in [0, 1]");
    }
  }
  return weighted_mean(per_sample_losses, delta);
}

std::pair<double, double> task_weights(const KpiState& state) {
  return {1.0 / std::max(state.kpi_bar_d, state.eps_floor),
          1.0 / std::max(state.kpi_bar_s, state.eps_floor)};
}

namespace {

// Shared between the preview and the committed update so both produce the
// exact same blend.
double blended_difficulty(const KpiState& state, const TaskDifficulty& prev, double kpi) {
  const double raw = 1.0 / std::max(kpi, state.eps_floor);
  return (state.difficulty_momentum && prev.init) ? state.alpha * raw + (1.0 - state.alpha) * prev.value
                                                  : raw;
}

void check_difficulty_args(const char* who, std::size_t n, const SampleKpis& kpis) {
  if (kpis.kpi_d.size() != n || kpis.kpi_s.size() != n || kpis.avail_d.size() != n ||
      kpis.avail_s.size() != n) {
    throw std::invalid_argument(std::string(who) + ": length mismatch for " + std::to_string(n) +
                                " ids");
  }
}

}  // namespace

BatchDifficulty batch_difficulties(const KpiState& state, const std::vector<std::int64_t>& ids,
                                   const SampleKpis& kpis) {
  const std::size_t n = ids.size();
  check_difficulty_args("batch_difficulties", n, kpis);
  BatchDifficulty out;
  out.det.resize(n, 1.0);
  out.seg.resize(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = state.sample_difficulty.find(ids[i]);
    const SampleDifficulty prev = it != state.sample_difficulty.end() ? it->second : SampleDifficulty{};
    out.det[i] = kpis.avail_d[i] ? blended_difficulty(state, prev.det, kpis.kpi_d[i])
                                 : (prev.det.init ? prev.det.value : 1.0);
    out.seg[i] = kpis.avail_s[i] ? blended_difficulty(state, prev.seg, kpis.kpi_s[i])
                                 : (prev.seg.init ? prev.seg.value : 1.0);
  }
  return out;
}

void update_sample_difficulties(KpiState& state, const std::vector<std::int64_t>& ids,
                                const SampleKpis& kpis, const std::vector<double>& delta_d,
                                const std::vector<double>& delta_s) {
  const std::size_t n = ids.size();
  check_difficulty_args("update_sample_difficulties", n, kpis);
  if (delta_d.size() != n || delta_s.size() != n) {
    throw std::invalid_argument("update_sample_difficulties: length mismatch for " +
                                std::to_string(n) + " ids");
  }
  const auto step = [&state](TaskDifficulty& t, double kpi, double delta) {
    t.value = blended_difficulty(state, t, kpi);
    t.init = true;
    t.selected = delta == 1.0 ? 1 : 0;
  };
  for (std::size_t i = 0; i < n; ++i) {
    SampleDifficulty& diff = state.sample_difficulty[ids[i]];
    if (kpis.avail_d[i]) {
      step(diff.det, kpis.kpi_d[i], delta_d[i]);
    } else {
      diff.det.selected = 0;
    }
    if (kpis.avail_s[i]) {
      step(diff.seg, kpis.kpi_s[i], delta_s[i]);
    } else {
      diff.seg.selected = 0;
    }
  }
}

CurveRecorder::CurveRecorder(const std::string& path, std::vector<std::int64_t> tracked_ids)
    : tracked_(std::move(tracked_ids)), path_(path) {
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) {
    fail();
    return;
  }
  out_ << "tau,sample_id,task,difficulty,selected\n";
  out_.flush();
  enabled_ = out_.good();
  if (!enabled_) fail();
}

void CurveRecorder::fail() {
  enabled_ = false;
  if (!warned_) {
    warned_ = true;
    std::fprintf(stderr, "warning: cannot write difficulty curves to %s; continuing\n",
                 path_.c_str());
  }
}

void CurveRecorder::append_row(std::int64_t tau, std::int64_t sample_id, char task,
                               double difficulty, bool selected) {
  if (!enabled_) return;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%c,%.12g,%d\n", static_cast<long long>(tau),
                static_cast<long long>(sample_id), task, difficulty, selected ? 1 : 0);
  out_ << buf;
  out_.flush();  // rows are inspectable while a run is still going
  if (!out_.good()) fail();
}

void record_difficulty_curves(const KpiState& state, CurveRecorder& sink) {
  if (!sink.enabled()) return;
  for (const std::int64_t id : sink.tracked()) {
    const auto it = state.sample_difficulty.find(id);
    if (it == state.sample_difficulty.end()) continue;
    if (it->second.det.init) {
      sink.append_row(state.tau, id, 'd', it->second.det.value, it->second.det.selected != 0);
    }
    if (it->second.seg.init) {
      sink.append_row(state.tau, id, 's', it->second.seg.value, it->second.seg.selected != 0);
    }
  }
}

}  // namespace fluorotask
