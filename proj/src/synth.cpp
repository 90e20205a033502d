#include "fluorotask/synth.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>

#include "fluorotask/rng.hpp"

namespace fluorotask {

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"size", c.size},
       {"min_electrodes", c.min_electrodes},
       {"max_electrodes", c.max_electrodes},
       {"electrode_radius_min", c.electrode_radius_min},
       {"electrode_radius_max", c.electrode_radius_max},
       {"tube_half_width_min", c.tube_half_width_min},
       {"tube_half_width_max", c.tube_half_width_max},
       {"tube_depth_min", c.tube_depth_min},
       {"tube_depth_max", c.tube_depth_max},
       {"electrode_depth_min", c.electrode_depth_min},
       {"electrode_depth_max", c.electrode_depth_max},
       {"max_distractors", c.max_distractors},
       {"distractor_depth_min", c.distractor_depth_min},
       {"distractor_depth_max", c.distractor_depth_max},
       {"noise_amplitude", c.noise_amplitude},
       {"background_base", c.background_base},
       {"gradient_amplitude", c.gradient_amplitude},
       {"collimation_prob", c.collimation_prob}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  GeneratorConfig d;
  c.size = j.value("size", d.size);
  c.min_electrodes = j.value("min_electrodes", d.min_electrodes);
  c.max_electrodes = j.value("max_electrodes", d.max_electrodes);
  c.electrode_radius_min = j.value("electrode_radius_min", d.electrode_radius_min);
  c.electrode_radius_max = j.value("electrode_radius_max", d.electrode_radius_max);
  c.tube_half_width_min = j.value("tube_half_width_min", d.tube_half_width_min);
  c.tube_half_width_max = j.value("tube_half_width_max", d.tube_half_width_max);
  c.tube_depth_min = j.value("tube_depth_min", d.tube_depth_min);
  c.tube_depth_max = j.value("tube_depth_max", d.tube_depth_max);
  c.electrode_depth_min = j.value("electrode_depth_min", d.electrode_depth_min);
  c.electrode_depth_max = j.value("electrode_depth_max", d.electrode_depth_max);
  c.max_distractors = j.value("max_distractors", d.max_distractors);
  c.distractor_depth_min = j.value("distractor_depth_min", d.distractor_depth_min);
  c.distractor_depth_max = j.value("distractor_depth_max", d.distractor_depth_max);
  c.noise_amplitude = j.value("noise_amplitude", d.noise_amplitude);
  c.background_base = j.value("background_base", d.background_base);
  c.gradient_amplitude = j.value("gradient_amplitude", d.gradient_amplitude);
  c.collimation_prob = j.value("collimation_prob", d.collimation_prob);
}

namespace {

using Point = std::array<double, 2>;

constexpr int kCurveControls = 6;
constexpr int kMaxCurveRetries = 120;
constexpr int kMaxPlacementRetries = 16;
// Electrode centers must stay separable on the stride-4 grid through 3x3
// peak suppression: three grid cells apart.
constexpr double kMinElectrodeSep = 12.0;

double quantize255(double v) { return std::round(v * 255.0) / 255.0; }

// Random-walk control points inside the safety margin, then a Catmull-Rom
// spline through them sampled at ~1/3 px steps.
std::vector<Point> sample_curve(RngStream& rng, int size, int n_controls,
                                double step_lo, double step_hi) {
  const double margin = 0.15 * size;
  const double lo = margin, hi = size - 1 - margin;
  std::vector<Point> ctrl(n_controls);
  ctrl[0] = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  double heading = rng.uniform(0.0, 6.283185307179586);
  for (int i = 1; i < n_controls; ++i) {
    const double step = rng.uniform(step_lo, step_hi) * size;
    heading += rng.uniform(-0.8, 0.8);
    double dx = std::cos(heading), dy = std::sin(heading);
    Point p = {ctrl[i - 1][0] + step * dx, ctrl[i - 1][1] + step * dy};
    // reflect off the margin box so the walk stays inside
    for (int ax = 0; ax < 2; ++ax) {
      if (p[ax] < lo) p[ax] = 2 * lo - p[ax];
      if (p[ax] > hi) p[ax] = 2 * hi - p[ax];
      p[ax] = std::clamp(p[ax], lo, hi);
    }
    heading = std::atan2(p[1] - ctrl[i - 1][1], p[0] - ctrl[i - 1][0]);
    ctrl[i] = p;
  }

  std::vector<Point> pts;
  auto at = [&](int i) {
    return ctrl[std::clamp(i, 0, n_controls - 1)];
  };
  for (int seg = 0; seg < n_controls - 1; ++seg) {
    const Point p0 = at(seg - 1), p1 = at(seg), p2 = at(seg + 1), p3 = at(seg + 2);
    const double chord = std::hypot(p2[0] - p1[0], p2[1] - p1[1]);
    const int steps = std::max(4, static_cast<int>(std::ceil(chord * 3.0)));
    for (int s = 0; s < steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const double t2 = t * t, t3 = t2 * t;
      Point q;
      for (int ax = 0; ax < 2; ++ax) {
        q[ax] = 0.5 * ((2.0 * p1[ax]) + (-p0[ax] + p2[ax]) * t +
                       (2.0 * p0[ax] - 5.0 * p1[ax] + 4.0 * p2[ax] - p3[ax]) * t2 +
                       (-p0[ax] + 3.0 * p1[ax] - 3.0 * p2[ax] + p3[ax]) * t3);
      }
      pts.push_back(q);
    }
  }
  pts.push_back(ctrl[n_controls - 1]);
  return pts;
}

std::vector<double> arc_lengths(const std::vector<Point>& pts) {
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    cum[i] = cum[i - 1] + std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
  }
  return cum;
}

Point point_at_arc(const std::vector<Point>& pts, const std::vector<double>& cum, double s) {
  auto it = std::lower_bound(cum.begin(), cum.end(), s);
  if (it == cum.begin()) return pts.front();
  if (it == cum.end()) return pts.back();
  const std::size_t i = static_cast<std::size_t>(it - cum.begin());
  const double seg = cum[i] - cum[i - 1];
  const double t = seg > 0.0 ? (s - cum[i - 1]) / seg : 0.0;
  return {pts[i - 1][0] + t * (pts[i][0] - pts[i - 1][0]),
          pts[i - 1][1] + t * (pts[i][1] - pts[i - 1][1])};
}

// True when the curve comes back close to itself: points far apart along the
// arc but near in the plane.
bool curve_self_collides(const std::vector<Point>& pts, const std::vector<double>& cum,
                         double min_dist) {
  const double arc_gap = 0.18 * cum.back();
  for (std::size_t i = 0; i < pts.size(); i += 4) {
    for (std::size_t j = i + 4; j < pts.size(); j += 4) {
      if (cum[j] - cum[i] < arc_gap) continue;
      const double d = std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
      if (d < min_dist) return true;
    }
  }
  return false;
}

// Stamps a soft disc into the attenuation buffer with max-combine.
void stamp_disc(std::vector<double>& att, int size, double cx, double cy,
                double radius, double depth) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double cov = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      if (cov <= 0.0) continue;
      double& a = att[y * size + x];
      a = std::max(a, cov * depth);
    }
  }
}

void stamp_curve(std::vector<double>& att, int size, const std::vector<Point>& pts,
                 double half_width, double depth) {
  // dense point stamping approximates the tube; 1/3 px spacing keeps the
  // scalloping error far below a quantization step
  for (const Point& p : pts) stamp_disc(att, size, p[0], p[1], half_width, depth);
}

}  // namespace

SampleRecord generate_sample(std::uint64_t seed, const GeneratorConfig& cfg) {
  if (cfg.size < 32 || cfg.size > 256 || cfg.size % 16 != 0) {
    throw std::invalid_argument("generator: image side must be in [32,256] and divisible by 16");
  }
  if (cfg.min_electrodes < 2 || cfg.max_electrodes > 10 ||
      cfg.min_electrodes > cfg.max_electrodes) {
    throw std::invalid_argument("generator: electrode count range must lie within [2,10]");
  }
  const int size = cfg.size;
  RngStream rng(derive_seed(seed, "sample"));

  // --- catheter geometry, retried until non-degenerate -----------------------
  std::vector<Point> curve;
  std::vector<double> cum;
  std::vector<Point> centers;
  std::vector<double> radii;
  int n_e = 0;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxCurveRetries && !ok; ++attempt) {
    curve = sample_curve(rng, size, kCurveControls, 0.22, 0.30);
    cum = arc_lengths(curve);
    if (cum.back() < 0.8 * size) continue;
    if (curve_self_collides(curve, cum, 2.0 * cfg.tube_half_width_max + 2.0)) continue;

    // the usable arc span bounds how many separable electrodes can fit; cap
    // the drawn count so placement is geometrically feasible on this curve
    const int cap = std::min(
        cfg.max_electrodes,
        static_cast<int>(std::floor(0.84 * cum.back() / (kMinElectrodeSep + 2.0))));
    if (cap < cfg.min_electrodes) continue;
    n_e = rng.uniform_int(cfg.min_electrodes, cap);
    const double span_lo = 0.08 * cum.back(), span_hi = 0.92 * cum.back();
    const double slot = (span_hi - span_lo) / n_e;
    for (int place = 0; place < kMaxPlacementRetries && !ok; ++place) {
      centers.clear();
      radii.clear();
      for (int i = 0; i < n_e; ++i) {
        const double jitter = rng.uniform(-0.15, 0.15) * slot;
        const double s = span_lo + (i + 0.5) * slot + jitter;
        centers.push_back(point_at_arc(curve, cum, s));
        radii.push_back(rng.uniform(cfg.electrode_radius_min, cfg.electrode_radius_max));
      }
      ok = true;
      for (int i = 0; i < n_e && ok; ++i) {
        const double m = radii[i] + 2.0;
        if (centers[i][0] < m || centers[i][0] > size - 1 - m ||
            centers[i][1] < m || centers[i][1] > size - 1 - m) {
          ok = false;
        }
        for (int j = 0; j < i && ok; ++j) {
          const double d = std::hypot(centers[i][0] - centers[j][0],
                                      centers[i][1] - centers[j][1]);
          if (d < kMinElectrodeSep) ok = false;
        }
      }
    }
  }
  if (!ok) {
    throw std::runtime_error("generator: no valid catheter layout after " +
                             std::to_string(kMaxCurveRetries) + " retries (seed " +
                             std::to_string(seed) + ")");
  }

  // --- device attenuation → mask ---------------------------------------------
  std::vector<double> att_dev(static_cast<std::size_t>(size) * size, 0.0);
  const double tube_hw = rng.uniform(cfg.tube_half_width_min, cfg.tube_half_width_max);
  const double tube_depth = rng.uniform(cfg.tube_depth_min, cfg.tube_depth_max);
  stamp_curve(att_dev, size, curve, tube_hw, tube_depth);
  for (int i = 0; i < n_e; ++i) {
    const double depth = rng.uniform(cfg.electrode_depth_min, cfg.electrode_depth_max);
    stamp_disc(att_dev, size, centers[i][0], centers[i][1], radii[i], depth);
  }
  for (auto& a : att_dev) a = quantize255(a);

  // Ground truth is a threshold of the (quantized) device attenuation alone,
  // so noise and distractors never perturb the mask.
  const double mask_thr =
      std::round(0.45 * cfg.tube_depth_min * 255.0) / 255.0 - 0.5 / 255.0;
  std::vector<std::uint8_t> mask(att_dev.size());
  for (std::size_t i = 0; i < att_dev.size(); ++i) mask[i] = att_dev[i] > mask_thr ? 1 : 0;

  // --- artifacts: distractor wires, shading, collimation, noise --------------
  std::vector<double> att_art(att_dev.size(), 0.0);
  const int n_d = cfg.max_distractors > 0 ? rng.uniform_int(0, cfg.max_distractors) : 0;
  for (int i = 0; i < n_d; ++i) {
    const auto wire = sample_curve(rng, size, 3, 0.25, 0.40);
    const double hw = rng.uniform(0.4, 1.0);
    const double depth = rng.uniform(cfg.distractor_depth_min, cfg.distractor_depth_max);
    stamp_curve(att_art, size, wire, hw, depth);
  }

  const double gx = rng.uniform(-cfg.gradient_amplitude, cfg.gradient_amplitude);
  const double gy = rng.uniform(-cfg.gradient_amplitude, cfg.gradient_amplitude);
  const bool collimated = rng.bernoulli(cfg.collimation_prob);
  const double coll_r = rng.uniform(0.53, 0.62) * size;

  const int grid = std::max(4, size / 8);
  std::vector<double> noise_grid(static_cast<std::size_t>(grid) * grid);
  for (auto& v : noise_grid) v = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude);

  SampleRecord rec;
  rec.size = size;
  rec.seed = seed;
  rec.mask = std::move(mask);
  rec.image.resize(att_dev.size());
  const double cx0 = 0.5 * (size - 1), cy0 = 0.5 * (size - 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      double v = cfg.background_base +
                 gx * (static_cast<double>(x) / size - 0.5) +
                 gy * (static_cast<double>(y) / size - 0.5);
      v -= att_dev[i];
      v -= att_art[i];
      if (collimated) {
        const double d = std::hypot(x - cx0, y - cy0);
        const double t = std::clamp((coll_r - d) / 2.0 + 0.5, 0.0, 1.0);
        v *= 0.35 + 0.65 * t;
      }
      // band-limited noise: bilinear lookup into the low-res grid
      {
        const double sx = std::clamp((x + 0.5) * grid / size - 0.5, 0.0, grid - 1.0);
        const double sy = std::clamp((y + 0.5) * grid / size - 0.5, 0.0, grid - 1.0);
        const int x0i = static_cast<int>(sx), y0i = static_cast<int>(sy);
        const int x1i = std::min(x0i + 1, grid - 1), y1i = std::min(y0i + 1, grid - 1);
        const double fx = sx - x0i, fy = sy - y0i;
        const double n0 = noise_grid[y0i * grid + x0i] * (1 - fx) + noise_grid[y0i * grid + x1i] * fx;
        const double n1 = noise_grid[y1i * grid + x0i] * (1 - fx) + noise_grid[y1i * grid + x1i] * fx;
        v += n0 * (1 - fy) + n1 * fy;
      }
      rec.image[i] = quantize255(std::clamp(v, 0.0, 1.0));
    }
  }

  rec.electrodes.reserve(n_e);
  for (int i = 0; i < n_e; ++i) {
    rec.electrodes.push_back({centers[i][0], centers[i][1], 2.0 * radii[i], 2.0 * radii[i]});
  }
  rec.centerline = std::move(curve);
  validate_record(rec);
  return rec;
}

void validate_record(const SampleRecord& rec) {
  const std::size_t n = static_cast<std::size_t>(rec.size) * rec.size;
  if (rec.size <= 0 || rec.image.size() != n || rec.mask.size() != n) {
    throw std::logic_error("record: image/mask size disagrees with declared side");
  }
  bool any_mask = false;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = rec.image[i];
    if (!(v >= 0.0 && v <= 1.0)) throw std::logic_error("record: image value outside [0,1]");
    if (std::fabs(v * 255.0 - std::round(v * 255.0)) > 1e-9) {
      throw std::logic_error("record: image value off the 1/255 grid");
    }
    if (rec.mask[i] > 1) throw std::logic_error("record: mask must be binary");
    any_mask = any_mask || rec.mask[i] != 0;
  }
  if (!any_mask) throw std::logic_error("record: empty mask");
  if (rec.electrodes.empty()) throw std::logic_error("record: no electrodes");
  for (const ElectrodeBox& e : rec.electrodes) {
    if (e.w <= 0.0 || e.h <= 0.0) throw std::logic_error("record: non-positive box extent");
    if (e.cx - e.w / 2 < -1.0 || e.cx + e.w / 2 > rec.size ||
        e.cy - e.h / 2 < -1.0 || e.cy + e.h / 2 > rec.size) {
      throw std::logic_error("record: electrode box out of bounds");
    }
    if (!rec.centerline.empty()) {
      double best = 1e18;
      for (const auto& p : rec.centerline) {
        best = std::min(best, std::hypot(p[0] - e.cx, p[1] - e.cy));
      }
      if (best > 2.0) throw std::logic_error("record: electrode off the centerline");
    }
  }
}

TargetBundle make_targets(const SampleRecord& rec, int stride) {
  if (stride <= 0 || rec.size % stride != 0) {
    throw std::invalid_argument("make_targets: stride must divide the image side");
  }
  TargetBundle tb;
  tb.stride = stride;
  tb.gw = rec.size / stride;
  tb.gh = rec.size / stride;
  tb.heatmap.assign(static_cast<std::size_t>(tb.gh) * tb.gw, 0.0);
  tb.size_map.assign(2 * static_cast<std::size_t>(tb.gh) * tb.gw, 0.0);
  tb.center_mask.assign(static_cast<std::size_t>(tb.gh) * tb.gw, 0.0);

  for (const ElectrodeBox& e : rec.electrodes) {
    const double gcx = e.cx / stride, gcy = e.cy / stride;
    const int icx = std::clamp(static_cast<int>(std::lround(gcx)), 0, tb.gw - 1);
    const int icy = std::clamp(static_cast<int>(std::lround(gcy)), 0, tb.gh - 1);
    // splat radius: a third of the box extent at grid resolution, floored at 1
    const double r = std::max(1.0, std::min(e.w, e.h) / (3.0 * stride));
    const double sigma = (2.0 * r + 1.0) / 6.0;
    const int win = std::max(2, static_cast<int>(std::ceil(3.0 * sigma)));
    const double dcx = icx - gcx, dcy = icy - gcy;
    for (int y = std::max(0, icy - win); y <= std::min(tb.gh - 1, icy + win); ++y) {
      for (int x = std::max(0, icx - win); x <= std::min(tb.gw - 1, icx + win); ++x) {
        // Gaussian about the continuous center, renormalized so the nearest
        // grid cell holds exactly 1; in log space this is still an exact
        // parabola centered at the true sub-cell position.
        const double dx = x - gcx, dy = y - gcy;
        const double v = std::exp(-(dx * dx - dcx * dcx + dy * dy - dcy * dcy) /
                                  (2.0 * sigma * sigma));
        double& h = tb.heatmap[static_cast<std::size_t>(y) * tb.gw + x];
        h = std::max(h, std::min(v, 1.0));
      }
    }
    const std::size_t c = static_cast<std::size_t>(icy) * tb.gw + icx;
    tb.heatmap[c] = 1.0;
    tb.size_map[c] = e.w;
    tb.size_map[static_cast<std::size_t>(tb.gh) * tb.gw + c] = e.h;
    if (tb.center_mask[c] == 0.0) {
      tb.center_mask[c] = 1.0;
      ++tb.peak_count;
    }
  }
  return tb;
}

namespace {

SampleRecord transform_record(const SampleRecord& rec,
                              const std::function<std::pair<int, int>(int, int)>& pixel_src,
                              const std::function<Point(Point)>& point_map) {
  SampleRecord out;
  out.id = rec.id;
  out.size = rec.size;
  out.seed = rec.seed;
  const int n = rec.size;
  out.image.resize(rec.image.size());
  out.mask.resize(rec.mask.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto [sx, sy] = pixel_src(x, y);
      out.image[static_cast<std::size_t>(y) * n + x] = rec.image[static_cast<std::size_t>(sy) * n + sx];
      out.mask[static_cast<std::size_t>(y) * n + x] = rec.mask[static_cast<std::size_t>(sy) * n + sx];
    }
  }
  for (const ElectrodeBox& e : rec.electrodes) {
    const Point p = point_map({e.cx, e.cy});
    out.electrodes.push_back({p[0], p[1], e.w, e.h});
  }
  for (const auto& p : rec.centerline) out.centerline.push_back(point_map(p));
  return out;
}

}  // namespace

SampleRecord flip_horizontal(const SampleRecord& rec) {
  const int n = rec.size;
  return transform_record(
      rec, [n](int x, int y) { return std::pair<int, int>{n - 1 - x, y}; },
      [n](Point p) { return Point{n - 1 - p[0], p[1]}; });
}

SampleRecord flip_vertical(const SampleRecord& rec) {
  const int n = rec.size;
  return transform_record(
      rec, [n](int x, int y) { return std::pair<int, int>{x, n - 1 - y}; },
      [n](Point p) { return Point{p[0], n - 1 - p[1]}; });
}

SampleRecord rotate90cw(const SampleRecord& rec) {
  const int n = rec.size;
  // out(x,y) = in(y, n-1-x); a feature at (x,y) moves to (n-1-y, x)
  return transform_record(
      rec, [n](int x, int y) { return std::pair<int, int>{y, n - 1 - x}; },
      [n](Point p) { return Point{n - 1 - p[1], p[0]}; });
}

namespace {

// Half-side crop at integer offset followed by nearest x2 resize. Returns
// false (leaving `out` untouched) when any electrode would leave the frame.
bool try_zoom2x(const SampleRecord& rec, int ox, int oy, SampleRecord& out) {
  const int n = rec.size;
  const int c = n / 2;
  for (const ElectrodeBox& e : rec.electrodes) {
    const double ncx = 2.0 * (e.cx - ox) + 0.5;
    const double ncy = 2.0 * (e.cy - oy) + 0.5;
    const double nw = 2.0 * e.w, nh = 2.0 * e.h;
    if (ncx - nw / 2 < 1.0 || ncx + nw / 2 > n - 2.0 ||
        ncy - nh / 2 < 1.0 || ncy + nh / 2 > n - 2.0) {
      return false;
    }
  }
  out.id = rec.id;
  out.size = n;
  out.seed = rec.seed;
  out.image.resize(rec.image.size());
  out.mask.resize(rec.mask.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int sx = ox + x / 2, sy = oy + y / 2;
      out.image[static_cast<std::size_t>(y) * n + x] = rec.image[static_cast<std::size_t>(sy) * n + sx];
      out.mask[static_cast<std::size_t>(y) * n + x] = rec.mask[static_cast<std::size_t>(sy) * n + sx];
    }
  }
  for (const ElectrodeBox& e : rec.electrodes) {
    out.electrodes.push_back({2.0 * (e.cx - ox) + 0.5, 2.0 * (e.cy - oy) + 0.5,
                              2.0 * e.w, 2.0 * e.h});
  }
  for (const auto& p : rec.centerline) {
    if (p[0] < ox - 0.5 || p[0] >= ox + c - 0.5 || p[1] < oy - 0.5 || p[1] >= oy + c - 0.5) {
      continue;  // outside the crop window
    }
    out.centerline.push_back({2.0 * (p[0] - ox) + 0.5, 2.0 * (p[1] - oy) + 0.5});
  }
  bool any = false;
  for (auto m : out.mask) any = any || m != 0;
  return any;
}

}  // namespace

SampleRecord augment(const SampleRecord& rec, std::uint64_t seed, const AugmentConfig& cfg) {
  RngStream rng(derive_seed(seed, "augment"));
  SampleRecord out = rec;
  if (cfg.zoom_prob > 0.0 && rng.bernoulli(cfg.zoom_prob)) {
    const int c = rec.size / 2;
    const int ox = rng.uniform_int(0, rec.size - c);
    const int oy = rng.uniform_int(0, rec.size - c);
    SampleRecord zoomed;
    if (try_zoom2x(out, ox, oy, zoomed)) out = std::move(zoomed);
  }
  if (cfg.rotations) {
    const int k = rng.uniform_int(0, 3);
    for (int i = 0; i < k; ++i) out = rotate90cw(out);
  }
  if (cfg.flips) {
    if (rng.bernoulli(0.5)) out = flip_horizontal(out);
    if (rng.bernoulli(0.5)) out = flip_vertical(out);
  }
  return out;
}

}  // namespace fluorotask
