#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fluorotask/ops.hpp"
#include "fluorotask/prioritizer.hpp"
#include "fluorotask/rng.hpp"
#include "fluorotask/tensor.hpp"

using namespace fluorotask;

namespace {

PrioritizationPolicy base_policy() {
  PrioritizationPolicy p;
  p.strategy = Strategy::kTopkHard;
  p.retention_rho = 0.7;
  p.alpha = 0.5;
  return p;
}

std::vector<std::uint8_t> ones(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

// Brute-force pixel-count IoU.
double iou_pixels(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] != 0) && (b[i] != 0);
    uni += (a[i] != 0) || (b[i] != 0);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

double total_variation(const std::vector<double>& xs) {
  double tv = 0.0;
  for (std::size_t i = 1; i < xs.size(); ++i) tv += std::fabs(xs[i] - xs[i - 1]);
  return tv;
}

}  // namespace

TEST_CASE("policy strings round-trip and bad values are rejected") {
  for (const std::string s :
       {"soft", "hard_threshold", "fixed_fraction", "topk_soft", "topk_hard"}) {
    CHECK(strategy_to_string(strategy_from_string(s)) == s);
  }
  CHECK_THROWS_AS(strategy_from_string("softmax"), std::invalid_argument);
  for (const std::string s : {"mae", "rmse", "focal_loss"}) {
    CHECK(det_kpi_metric_to_string(det_kpi_metric_from_string(s)) == s);
  }
  for (const std::string s : {"iou", "dice", "ce"}) {
    CHECK(seg_kpi_metric_to_string(seg_kpi_metric_from_string(s)) == s);
  }
  CHECK_THROWS_AS(det_kpi_metric_from_string("iou"), std::invalid_argument);
  CHECK_THROWS_AS(seg_kpi_metric_from_string("mae"), std::invalid_argument);

  PrioritizationPolicy p = base_policy();
  p.retention_rho = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = base_policy();
  p.alpha = 1.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = base_policy();
  p.eps_floor = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);

  p = base_policy();
  p.strategy = Strategy::kTopkSoft;
  p.kpi_metric_d = DetKpiMetric::kRmse;
  p.kpi_metric_s = SegKpiMetric::kDice;
  p.difficulty_momentum = false;
  nlohmann::json j = p;
  const PrioritizationPolicy q = j.get<PrioritizationPolicy>();
  CHECK(q.strategy == p.strategy);
  CHECK(q.retention_rho == p.retention_rho);
  CHECK(q.threshold_eta == p.threshold_eta);
  CHECK(q.alpha == p.alpha);
  CHECK(q.kpi_metric_d == p.kpi_metric_d);
  CHECK(q.kpi_metric_s == p.kpi_metric_s);
  CHECK(q.eps_floor == p.eps_floor);
  CHECK(q.difficulty_momentum == p.difficulty_momentum);
}

TEST_CASE("perfect predictions score a KPI of one on both tasks") {
  SampleTarget t;
  t.electrodes = {{20, 20, 6, 6}, {40, 28, 5, 5}};
  t.mask = {0, 1, 1, 0, 1, 0, 0, 0};
  t.diag_px = 64.0 * std::sqrt(2.0);
  SamplePrediction p;
  p.detections = {{20, 20, 6, 6, 0.9}, {40, 28, 5, 5, 0.8}};
  p.mask = t.mask;
  const SampleKpis k = compute_sample_kpis({p}, {t}, base_policy());
  REQUIRE(k.kpi_d.size() == 1);
  CHECK(k.avail_d[0] == 1);
  CHECK(k.avail_s[0] == 1);
  CHECK(k.kpi_d[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(k.kpi_s[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("detection KPI follows the bounded localization mapping") {
  const double diag = 64.0 * std::sqrt(2.0);
  SampleTarget t;
  t.electrodes = {{20, 20, 12, 12}};
  t.mask = {1};
  t.diag_px = diag;
  SamplePrediction p;
  p.detections = {{23, 20, 12, 12, 0.9}};  // matched 3 px off
  p.mask = {1};
  PrioritizationPolicy pol = base_policy();

  const SampleKpis mae = compute_sample_kpis({p}, {t}, pol);
  CHECK(mae.kpi_d[0] == doctest::Approx(1.0 / (1.0 + 3.0 / (0.05 * diag))).epsilon(1e-12));

  // A missed box is charged the full diagonal.
  SamplePrediction missp;
  missp.mask = {1};
  const SampleKpis miss = compute_sample_kpis({missp}, {t}, pol);
  CHECK(miss.kpi_d[0] == doctest::Approx(1.0 / (1.0 + diag / (0.05 * diag))).epsilon(1e-12));
  CHECK(miss.kpi_d[0] == doctest::Approx(1.0 / 21.0).epsilon(1e-12));

  pol.kpi_metric_d = DetKpiMetric::kRmse;
  SampleTarget t2 = t;
  t2.electrodes = {{20, 20, 20, 20}, {60, 20, 20, 20}};
  SamplePrediction p2;
  p2.detections = {{23, 20, 20, 20, 0.9}, {60, 25, 20, 20, 0.8}};  // errors 3 and 5
  p2.mask = {1};
  const SampleKpis rmse = compute_sample_kpis({p2}, {t2}, pol);
  CHECK(rmse.kpi_d[0] ==
        doctest::Approx(1.0 / (1.0 + std::sqrt(17.0) / (0.05 * diag))).epsilon(1e-12));

  pol.kpi_metric_d = DetKpiMetric::kFocalLossBased;
  SamplePrediction p3;
  p3.focal_loss = 0.25;
  p3.mask = {1};
  const SampleKpis focal = compute_sample_kpis({p3}, {t}, pol);
  CHECK(focal.kpi_d[0] == doctest::Approx(1.0 / 1.25).epsilon(1e-12));
}

TEST_CASE("segmentation KPI equals pixel-count overlap exactly") {
  RngStream rng(23);
  PrioritizationPolicy pol = base_policy();
  for (int trial = 0; trial < 200; ++trial) {
    SampleTarget t;
    SamplePrediction p;
    t.mask.resize(48);
    p.mask.resize(48);
    bool any = false;
    for (std::size_t i = 0; i < t.mask.size(); ++i) {
      t.mask[i] = rng.uniform(0, 1) < 0.4;
      p.mask[i] = rng.uniform(0, 1) < 0.4;
      any = any || t.mask[i];
    }
    t.diag_px = 10.0;
    const SampleKpis k = compute_sample_kpis({p}, {t}, pol);
    if (!any) {
      CHECK(k.avail_s[0] == 0);
      CHECK(k.kpi_s[0] == 0.0);
    } else {
      CHECK(k.avail_s[0] == 1);
      CHECK(k.kpi_s[0] == iou_pixels(p.mask, t.mask));  // exact, both count pixels
    }
  }

  pol.kpi_metric_s = SegKpiMetric::kDice;
  SampleTarget t;
  t.mask = {1, 1, 1, 1, 0, 0, 0, 0};
  t.diag_px = 10.0;
  SamplePrediction p;
  p.mask = {0, 0, 1, 1, 1, 1, 0, 0};
  const SampleKpis k = compute_sample_kpis({p}, {t}, pol);
  CHECK(k.kpi_s[0] == doctest::Approx(0.5).epsilon(1e-15));  // J=1/3 -> Dice 1/2

  pol.kpi_metric_s = SegKpiMetric::kCeBased;
  p.ce_loss = 3.0;
  const SampleKpis ce = compute_sample_kpis({p}, {t}, pol);
  CHECK(ce.kpi_s[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("tasks without ground truth are unavailable, never NaN") {
  SampleTarget t;           // no electrodes, empty mask
  t.mask.assign(16, 0);
  t.diag_px = 10.0;
  SamplePrediction p;
  p.mask.assign(16, 0);
  const SampleKpis k = compute_sample_kpis({p}, {t}, base_policy());
  CHECK(k.avail_d[0] == 0);
  CHECK(k.avail_s[0] == 0);
  CHECK(k.kpi_d[0] == 0.0);
  CHECK(k.kpi_s[0] == 0.0);

  CHECK_THROWS_AS(compute_sample_kpis({p, p}, {t}, base_policy()), std::invalid_argument);
  SampleTarget bad = t;
  bad.mask.assign(8, 1);  // pred/gt mask size mismatch
  CHECK_THROWS_AS(compute_sample_kpis({p}, {bad}, base_policy()), std::invalid_argument);
  SampleTarget nodiag;
  nodiag.electrodes = {{5, 5, 3, 3}};
  nodiag.mask = {1};
  SamplePrediction pm;
  pm.mask = {1};
  CHECK_THROWS_AS(compute_sample_kpis({pm}, {nodiag}, base_policy()), std::invalid_argument);
}

TEST_CASE("smoothing follows the discounted recurrence") {
  KpiState s;
  s.alpha = 0.5;
  s.eps_floor = 0.05;
  s.kpi_bar_d = 0.8;
  s.init_d = true;
  ema_update(s, 0.4, std::nullopt);
  CHECK(s.kpi_bar_d == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(s.tau == 1);
  CHECK_FALSE(s.init_s);
  CHECK(s.kpi_bar_s == 1.0);  // untouched

  // alpha = 1 tracks the newest value exactly.
  KpiState track;
  track.alpha = 1.0;
  ema_update(track, 0.7, 0.3);
  ema_update(track, 0.2, 0.9);
  CHECK(track.kpi_bar_d == 0.2);
  CHECK(track.kpi_bar_s == 0.9);
  CHECK(track.tau == 2);

  // First observation initializes the average directly.
  KpiState first;
  first.alpha = 0.25;
  ema_update(first, 0.6, std::nullopt);
  CHECK(first.kpi_bar_d == 0.6);

  CHECK_THROWS_AS(ema_update(first, 1.2, std::nullopt), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(first, std::nullopt, -0.1), std::invalid_argument);
}

TEST_CASE("constant input reaches the closed form of the recurrence") {
  const double alpha = 0.3, kappa = 0.4, bar0 = 0.9;
  KpiState s;
  s.alpha = alpha;
  s.kpi_bar_d = bar0;
  s.init_d = true;
  const int steps = 20;
  for (int t = 0; t < steps; ++t) ema_update(s, kappa, std::nullopt);
  const double closed = kappa + std::pow(1.0 - alpha, steps) * (bar0 - kappa);
  CHECK(s.kpi_bar_d == doctest::Approx(closed).epsilon(1e-12));
  CHECK(s.tau == steps);
}

TEST_CASE("each update contracts the distance to the observation") {
  RngStream rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    KpiState s;
    s.alpha = rng.uniform(0.05, 0.95);
    s.kpi_bar_d = rng.uniform(0.2, 1.0);
    s.init_d = true;
    const double kappa = rng.uniform(0.2, 1.0);
    const double before = std::fabs(s.kpi_bar_d - kappa);
    ema_update(s, kappa, std::nullopt);
    CHECK(std::fabs(s.kpi_bar_d - kappa) ==
          doctest::Approx((1.0 - s.alpha) * before).epsilon(1e-12));
  }
}

TEST_CASE("the floor is applied after the recurrence") {
  KpiState s;
  s.alpha = 1.0;
  s.eps_floor = 0.05;
  ema_update(s, 0.0, 0.02);
  CHECK(s.kpi_bar_d == 0.05);
  CHECK(s.kpi_bar_s == 0.05);
  // And the smoothed value never leaves [floor, 1].
  RngStream rng(15);
  KpiState w;
  w.alpha = 0.4;
  for (int t = 0; t < 300; ++t) {
    ema_update(w, rng.uniform(0, 1), rng.uniform(0, 1));
    CHECK(w.kpi_bar_d >= w.eps_floor);
    CHECK(w.kpi_bar_d <= 1.0);
    CHECK(w.kpi_bar_s >= w.eps_floor);
    CHECK(w.kpi_bar_s <= 1.0);
  }
}

TEST_CASE("seven of ten samples survive at seventy percent retention") {
  const std::vector<double> d = {0.4, 2.0, 1.1, 0.2, 3.3, 0.9, 2.8, 1.5, 0.7, 2.2};
  PrioritizationPolicy pol = base_policy();  // topk_hard, rho 0.7
  const SelectionResult r = select_samples(d, ones(10), pol);
  REQUIRE(r.delta.size() == 10);
  CHECK_FALSE(r.skipped);
  int n_sel = 0;
  for (const double v : r.delta) {
    CHECK((v == 0.0 || v == 1.0));
    n_sel += v == 1.0;
  }
  CHECK(n_sel == 7);
  // The three smallest difficulties (0.2, 0.4, 0.7) are the ones dropped.
  CHECK(r.delta[3] == 0.0);
  CHECK(r.delta[0] == 0.0);
  CHECK(r.delta[8] == 0.0);
}

TEST_CASE("equal difficulties fall back to the smallest ids") {
  const std::vector<double> d(10, 1.0);
  PrioritizationPolicy pol = base_policy();
  const SelectionResult r = select_samples(d, ones(10), pol);
  for (int i = 0; i < 10; ++i) CHECK(r.delta[static_cast<std::size_t>(i)] == (i < 7 ? 1.0 : 0.0));

  // Explicit ids override batch positions in the tie rule.
  const std::vector<std::int64_t> ids = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  const SelectionResult rr = select_samples(d, ones(10), pol, &ids);
  for (int i = 0; i < 10; ++i) CHECK(rr.delta[static_cast<std::size_t>(i)] == (i >= 3 ? 1.0 : 0.0));
}

TEST_CASE("soft weights normalize by the hardest sample and keep its order") {
  RngStream rng(91);
  PrioritizationPolicy pol = base_policy();
  pol.strategy = Strategy::kSoft;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (double& v : d) v = rng.uniform(0.0, 5.0);
    const SelectionResult r = select_samples(d, ones(static_cast<std::size_t>(n)), pol);
    const double dmax = *std::max_element(d.begin(), d.end());
    double wmax = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      wmax = std::max(wmax, r.delta[i]);
      if (dmax > 0.0) {
        CHECK(r.delta[i] == doctest::Approx(d[i] / dmax).epsilon(1e-15));
      }
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (d[i] < d[k]) CHECK(r.delta[i] <= r.delta[k]);
      }
    }
    CHECK(wmax == 1.0);
  }
}

TEST_CASE("soft equals topk_soft at full retention") {
  RngStream rng(133);
  PrioritizationPolicy soft = base_policy();
  soft.strategy = Strategy::kSoft;
  PrioritizationPolicy topk = base_policy();
  topk.strategy = Strategy::kTopkSoft;
  topk.retention_rho = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 10);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (double& v : d) v = rng.uniform(0.0, 3.0);
    const auto a = select_samples(d, ones(static_cast<std::size_t>(n)), soft);
    const auto b = select_samples(d, ones(static_cast<std::size_t>(n)), topk);
    CHECK(a.delta == b.delta);
  }
}

TEST_CASE("hard threshold cuts strictly above eta on the soft weight") {
  PrioritizationPolicy pol = base_policy();
  pol.strategy = Strategy::kHardThreshold;
  pol.threshold_eta = 0.5;
  const std::vector<double> d = {2.0, 1.0, 4.0, 2.4};
  // soft weights 0.5, 0.25, 1.0, 0.6
  const SelectionResult r = select_samples(d, ones(4), pol);
  CHECK(r.delta == std::vector<double>{0.0, 0.0, 1.0, 1.0});

  RngStream rng(55);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 10);
    std::vector<double> dd(static_cast<std::size_t>(n));
    for (double& v : dd) v = rng.uniform(0.0, 5.0);
    pol.threshold_eta = rng.uniform(0.0, 1.0);
    const auto got = select_samples(dd, ones(static_cast<std::size_t>(n)), pol);
    const double dmax = *std::max_element(dd.begin(), dd.end());
    for (std::size_t i = 0; i < dd.size(); ++i) {
      const double soft = dmax > 0.0 ? dd[i] / dmax : 1.0;
      CHECK(got.delta[i] == (soft > pol.threshold_eta ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("ranked selection matches an independent sort oracle") {
  RngStream rng(201);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<double> d(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> avail(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = rng.uniform_int(0, 4);  // integer difficulties force ties
      avail[i] = rng.uniform(0, 1) < 0.8;
    }
    PrioritizationPolicy pol = base_policy();
    const double rhos[] = {0.3, 0.5, 0.7, 1.0};
    pol.retention_rho = rhos[rng.uniform_int(0, 3)];
    pol.strategy = rng.uniform(0, 1) < 0.5 ? Strategy::kTopkHard : Strategy::kTopkSoft;
    const SelectionResult r = select_samples(d, avail, pol);

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < avail.size(); ++i) {
      if (avail[i]) idx.push_back(i);
    }
    if (idx.empty()) {
      CHECK(r.skipped);
      CHECK(std::all_of(r.delta.begin(), r.delta.end(), [](double v) { return v == 0.0; }));
      continue;
    }
    CHECK_FALSE(r.skipped);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
    const std::size_t m = idx.size();
    const std::size_t keep =
        m - static_cast<std::size_t>(std::floor((1.0 - pol.retention_rho) * static_cast<double>(m) + 1e-9));
    double dmax = 0.0;
    for (const std::size_t i : idx) dmax = std::max(dmax, d[i]);
    std::vector<double> want(d.size(), 0.0);
    for (std::size_t k = 0; k < keep; ++k) {
      want[idx[k]] = pol.strategy == Strategy::kTopkHard
                         ? 1.0
                         : (dmax > 0.0 ? d[idx[k]] / dmax : 1.0);
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(r.delta[i] == doctest::Approx(want[i]).epsilon(1e-15));
    }
    // Support is exactly the descending prefix: every selected difficulty is
    // >= every unselected available one.
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (avail[i] && avail[k] && r.delta[i] > 0.0 && r.delta[k] == 0.0) {
          CHECK(d[i] >= d[k]);
        }
      }
    }
  }
}

TEST_CASE("fixed fraction applies the per-epoch ranking flags") {
  PrioritizationPolicy pol = base_policy();
  pol.strategy = Strategy::kFixedFraction;
  const std::vector<double> d = {1.0, 2.0, 3.0, 4.0};
  const std::vector<std::uint8_t> epoch = {1, 0, 1, 0};
  std::vector<std::uint8_t> avail = ones(4);
  avail[0] = 0;
  const SelectionResult r = select_samples(d, avail, pol, nullptr, &epoch);
  CHECK(r.delta == std::vector<double>{0.0, 0.0, 1.0, 0.0});  // epoch pick AND available
  CHECK_THROWS_AS(select_samples(d, avail, pol), std::invalid_argument);
  const std::vector<std::uint8_t> short_flags = {1, 0};
  CHECK_THROWS_AS(select_samples(d, avail, pol, nullptr, &short_flags), std::invalid_argument);
}

TEST_CASE("selection input validation") {
  PrioritizationPolicy pol = base_policy();
  const SelectionResult empty = select_samples({1.0, 2.0}, {0, 0}, pol);
  CHECK(empty.skipped);
  CHECK(empty.delta == std::vector<double>{0.0, 0.0});

  CHECK_THROWS_AS(select_samples({1.0}, {1, 1}, pol), std::invalid_argument);
  CHECK_THROWS_AS(select_samples({-1.0}, {1}, pol), std::invalid_argument);
  CHECK_THROWS_AS(select_samples({std::nan("")}, {1}, pol), std::invalid_argument);
  const std::vector<std::int64_t> ids = {1, 2, 3};
  CHECK_THROWS_AS(select_samples({1.0}, {1}, pol, &ids), std::invalid_argument);
}

TEST_CASE("masking averages over the full batch size") {
  const Tensor losses = Tensor::from_data({2}, {2.0, 8.0});
  const Tensor half = masked_task_loss(losses, {1.0, 0.0});
  CHECK(half.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor full = masked_task_loss(losses, {1.0, 1.0});
  CHECK(full.data()[0] == doctest::Approx(5.0).epsilon(1e-15));

  RngStream rng(303);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 10);
    std::vector<double> l(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < l.size(); ++i) {
      l[i] = rng.uniform(0.0, 6.0);
      w[i] = rng.uniform_int(0, 4) == 0 ? 0.0 : rng.uniform(0.0, 1.0);
    }
    const Tensor got = masked_task_loss(Tensor::from_data({n}, l), w);
    double want = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) want += w[i] * l[i];
    want /= static_cast<double>(n);
    CHECK(got.data()[0] == doctest::Approx(want).epsilon(1e-12));
  }

  CHECK_THROWS_AS(masked_task_loss(losses, {0.5}), std::invalid_argument);
  CHECK_THROWS_AS(masked_task_loss(losses, {0.5, 1.5}), std::invalid_argument);
}

TEST_CASE("masking backpropagates each sample's weight over n") {
  Tensor losses = Tensor::from_data({4}, {1.0, 2.0, 3.0, 4.0}, /*requires_grad=*/true);
  const std::vector<double> delta = {1.0, 0.0, 0.5, 1.0};
  Tape tape;
  Tensor out = masked_task_loss(losses, delta);
  tape.backward(out);
  REQUIRE(losses.grad().size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(losses.grad()[i] == doctest::Approx(delta[i] / 4.0).epsilon(1e-15));
  }
}

TEST_CASE("task weights invert the smoothed KPIs with a bounded floor") {
  KpiState s;
  s.eps_floor = 0.05;
  s.kpi_bar_d = 1.0;
  s.kpi_bar_s = 1.0;
  CHECK(task_weights(s) == std::pair<double, double>{1.0, 1.0});
  s.kpi_bar_d = 0.5;
  s.kpi_bar_s = 0.25;
  CHECK(task_weights(s) == std::pair<double, double>{2.0, 4.0});
  s.kpi_bar_d = 0.01;  // below the floor
  CHECK(task_weights(s).first == doctest::Approx(20.0).epsilon(1e-15));

  RngStream rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    s.kpi_bar_d = rng.uniform(0.05, 1.0);
    s.kpi_bar_s = rng.uniform(0.05, 1.0);
    const auto [wd, ws] = task_weights(s);
    CHECK(wd * s.kpi_bar_d == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ws * s.kpi_bar_s == doctest::Approx(1.0).epsilon(1e-15));
    if (s.kpi_bar_d < s.kpi_bar_s) {
      CHECK(wd >= ws);  // the weaker task always gets the larger weight
    }
  }
}

TEST_CASE("difficulty registry tracks inverted KPIs with optional momentum") {
  KpiState raw;
  raw.difficulty_momentum = false;
  raw.eps_floor = 0.05;
  SampleKpis k;
  k.kpi_d = {0.5};
  k.kpi_s = {0.25};
  k.avail_d = {1};
  k.avail_s = {1};
  update_sample_difficulties(raw, {42}, k, {1.0}, {0.7});
  REQUIRE(raw.sample_difficulty.count(42) == 1);
  CHECK(raw.sample_difficulty[42].det.value == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(raw.sample_difficulty[42].seg.value == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(raw.sample_difficulty[42].det.selected == 1);  // delta exactly one
  CHECK(raw.sample_difficulty[42].seg.selected == 0);  // fractional weight

  // With momentum the registry smooths the inverted KPI stream.
  KpiState mom;
  mom.difficulty_momentum = true;
  mom.alpha = 0.5;
  update_sample_difficulties(mom, {7}, k, {1.0}, {1.0});
  SampleKpis k2 = k;
  k2.kpi_d = {1.0};
  update_sample_difficulties(mom, {7}, k2, {0.0}, {1.0});
  CHECK(mom.sample_difficulty[7].det.value == doctest::Approx(0.5 * 1.0 + 0.5 * 2.0).epsilon(1e-15));
  CHECK(mom.sample_difficulty[7].det.selected == 0);

  // Unavailable tasks keep their last difficulty and drop the selection flag.
  SampleKpis gone;
  gone.kpi_d = {0.0};
  gone.kpi_s = {0.5};
  gone.avail_d = {0};
  gone.avail_s = {1};
  update_sample_difficulties(raw, {42}, gone, {0.0}, {1.0});
  CHECK(raw.sample_difficulty[42].det.value == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(raw.sample_difficulty[42].det.selected == 0);
  CHECK(raw.sample_difficulty[42].seg.selected == 1);

  CHECK_THROWS_AS(update_sample_difficulties(raw, {1, 2}, k, {1.0}, {1.0}),
                  std::invalid_argument);
}

TEST_CASE("difficulty previews equal the values committed after selection") {
  RngStream rng(515);
  KpiState state;
  state.difficulty_momentum = true;
  state.alpha = 0.5;
  state.eps_floor = 0.05;
  // Replay random batches; at every step the preview must predict exactly
  // what the registry holds once the update lands, including momentum blends
  // against earlier rounds and fallbacks for unavailable tasks.
  for (int step = 0; step < 50; ++step) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 5));
    std::vector<std::int64_t> ids(n);
    SampleKpis k;
    for (int i = 0; i < n; ++i) {
      ids[i] = rng.uniform_int(0, 7);  // collisions across steps exercise momentum
      k.kpi_d.push_back(rng.uniform());
      k.kpi_s.push_back(rng.uniform());
      k.avail_d.push_back(rng.uniform() < 0.8 ? 1 : 0);
      k.avail_s.push_back(rng.uniform() < 0.8 ? 1 : 0);
    }
    // Batches repeat ids only across steps, not within one, so the committed
    // value is well defined.
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    k.kpi_d.resize(ids.size());
    k.kpi_s.resize(ids.size());
    k.avail_d.resize(ids.size());
    k.avail_s.resize(ids.size());

    const BatchDifficulty preview = batch_difficulties(state, ids, k);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!k.avail_d[i]) {
        const auto it = state.sample_difficulty.find(ids[i]);
        const double expect = it != state.sample_difficulty.end() && it->second.det.init
                                  ? it->second.det.value
                                  : 1.0;
        CHECK(preview.det[i] == expect);
      }
    }
    update_sample_difficulties(state, ids, k, std::vector<double>(ids.size(), 1.0),
                               std::vector<double>(ids.size(), 0.0));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const SampleDifficulty& stored = state.sample_difficulty[ids[i]];
      if (k.avail_d[i]) CHECK(preview.det[i] == stored.det.value);
      if (k.avail_s[i]) CHECK(preview.seg[i] == stored.seg.value);
    }
  }
  CHECK_THROWS_AS(batch_difficulties(state, {1, 2}, SampleKpis{}), std::invalid_argument);
}

TEST_CASE("curve file carries one row per tracked sample and task") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ft_curves";
  fs::create_directories(dir);
  const fs::path file = dir / "difficulty_curves.csv";

  KpiState state;
  state.alpha = 0.5;
  CurveRecorder sink(file.string(), {0, 1, 2});
  REQUIRE(sink.enabled());

  RngStream rng(11);
  for (int iter = 0; iter < 10; ++iter) {
    SampleKpis k;
    for (int i = 0; i < 3; ++i) {
      k.kpi_d.push_back(rng.uniform(0.1, 1.0));
      k.kpi_s.push_back(rng.uniform(0.1, 1.0));
      k.avail_d.push_back(1);
      k.avail_s.push_back(1);
    }
    const std::vector<double> delta_d = {1.0, 0.0, 1.0};
    const std::vector<double> delta_s = {0.0, 1.0, 1.0};
    ema_update(state, 0.5, 0.5);
    update_sample_difficulties(state, {0, 1, 2}, k, delta_d, delta_s);
    record_difficulty_curves(state, sink);
  }

  const std::vector<std::string> lines = read_lines(file);
  REQUIRE(lines.size() == 1 + 60);  // header + 3 samples * 2 tasks * 10 iters
  CHECK(lines[0] == "tau,sample_id,task,difficulty,selected");
  int d_rows = 0, s_rows = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream ss(lines[i]);
    std::string tau, id, task, diff, sel;
    REQUIRE(std::getline(ss, tau, ','));
    REQUIRE(std::getline(ss, id, ','));
    REQUIRE(std::getline(ss, task, ','));
    REQUIRE(std::getline(ss, diff, ','));
    REQUIRE(std::getline(ss, sel, ','));
    CHECK((task == "d" || task == "s"));
    d_rows += task == "d";
    s_rows += task == "s";
    CHECK((sel == "0" || sel == "1"));
    if (task == "d") CHECK(sel == ((id == "0" || id == "2") ? "1" : "0"));
    if (task == "s") CHECK(sel == ((id == "1" || id == "2") ? "1" : "0"));
    CHECK(std::stod(diff) >= 1.0);  // difficulty of a KPI in (0,1] is >= 1
  }
  CHECK(d_rows == 30);
  CHECK(s_rows == 30);
  fs::remove_all(dir);
}

TEST_CASE("curves only cover tracked ids already observed") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ft_curves_partial";
  fs::create_directories(dir);
  const fs::path file = dir / "c.csv";
  KpiState state;
  CurveRecorder sink(file.string(), {5, 99});  // 99 never appears
  SampleKpis k;
  k.kpi_d = {0.5};
  k.kpi_s = {0.5};
  k.avail_d = {1};
  k.avail_s = {0};  // segmentation never observed for id 5
  ema_update(state, 0.5, std::nullopt);
  update_sample_difficulties(state, {5}, k, {1.0}, {0.0});
  record_difficulty_curves(state, sink);
  const std::vector<std::string> lines = read_lines(file);
  REQUIRE(lines.size() == 2);
  CHECK(lines[1].rfind("1,5,d,", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("momentum lowers the total variation of a replayed difficulty curve") {
  RngStream rng(400);
  std::vector<double> kappa_stream;
  for (int t = 0; t < 200; ++t) kappa_stream.push_back(rng.uniform(0.1, 1.0));

  const auto replay = [&](bool momentum) {
    KpiState state;
    state.alpha = 0.5;
    state.difficulty_momentum = momentum;
    std::vector<double> series;
    for (const double kappa : kappa_stream) {
      SampleKpis k;
      k.kpi_d = {kappa};
      k.kpi_s = {kappa};
      k.avail_d = {1};
      k.avail_s = {1};
      update_sample_difficulties(state, {0}, k, {1.0}, {1.0});
      series.push_back(state.sample_difficulty[0].det.value);
    }
    return series;
  };
  const std::vector<double> smooth = replay(true);
  const std::vector<double> jagged = replay(false);
  CHECK(total_variation(smooth) <= total_variation(jagged));
  CHECK(total_variation(smooth) < 0.95 * total_variation(jagged));  // strictly helpful here
}

TEST_CASE("an unwritable curve sink never interrupts the run") {
  CurveRecorder sink("/nonexistent_dir_for_curves/c.csv", {1});
  CHECK_FALSE(sink.enabled());
  KpiState state;
  SampleKpis k;
  k.kpi_d = {0.5};
  k.kpi_s = {0.5};
  k.avail_d = {1};
  k.avail_s = {1};
  update_sample_difficulties(state, {1}, k, {1.0}, {1.0});
  record_difficulty_curves(state, sink);  // drops rows, must not throw
  CHECK(state.sample_difficulty.count(1) == 1);
}

TEST_CASE("tracker state serializes losslessly") {
  KpiState s;
  s.alpha = 0.125;
  s.eps_floor = 0.05;
  s.kpi_bar_d = 0.6180339887498949;
  s.kpi_bar_s = 0.30901699437494745;
  s.init_d = true;
  s.init_s = true;
  s.tau = 1234;
  s.difficulty_momentum = false;
  s.sample_difficulty[3].det = {1.7320508075688772, true, 1};
  s.sample_difficulty[3].seg = {2.2360679774997896, true, 0};
  s.sample_difficulty[11].det = {1.0, true, 0};

  nlohmann::json j = s;
  const KpiState r = j.get<KpiState>();
  CHECK(r.alpha == s.alpha);
  CHECK(r.eps_floor == s.eps_floor);
  CHECK(r.kpi_bar_d == s.kpi_bar_d);
  CHECK(r.kpi_bar_s == s.kpi_bar_s);
  CHECK(r.init_d == s.init_d);
  CHECK(r.init_s == s.init_s);
  CHECK(r.tau == s.tau);
  CHECK(r.difficulty_momentum == s.difficulty_momentum);
  REQUIRE(r.sample_difficulty.size() == 2);
  CHECK(r.sample_difficulty.at(3).det.value == s.sample_difficulty.at(3).det.value);
  CHECK(r.sample_difficulty.at(3).seg.value == s.sample_difficulty.at(3).seg.value);
  CHECK(r.sample_difficulty.at(3).det.selected == 1);
  CHECK(r.sample_difficulty.at(11).det.value == 1.0);
  CHECK_FALSE(r.sample_difficulty.at(11).seg.init);

  // The round trip survives a dump/parse cycle byte-for-byte as well.
  const nlohmann::json j2 = r;
  CHECK(j.dump() == j2.dump());
}
