#include "fluorotask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fluorotask/tensor.hpp"

namespace fluorotask {

namespace {

// log(sigmoid(z)) without overflow; keeps resolution where sigmoid saturates.
double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Vertex of the parabola through (-1,lm), (0,l0), (1,lp); 0 when the fit is
// degenerate or not concave. Clamped to half a cell.
double parabolic_offset(double lm, double l0, double lp) {
  const double denom = lm - 2.0 * l0 + lp;
  if (!(denom < -1e-12)) return 0.0;
  const double off = (lm - lp) / (2.0 * denom);
  return std::clamp(off, -0.5, 0.5);
}

// Greedy matching at one threshold: detections in descending-score order
// (ties by emission order) each claim the unmatched ground truth with the
// highest IoU >= thr, ties by smallest index. Returns per-detection ground
// truth index (in score order) or -1.
std::vector<int> greedy_match(const std::vector<Detection>& dets,
                              const std::vector<ElectrodeBox>& gts, double thr,
                              std::vector<std::size_t>* order_out) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<char> taken(gts.size(), 0);
  std::vector<int> match(dets.size(), -1);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Detection& d = dets[order[k]];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double iou =
          box_iou(d.cx, d.cy, d.w, d.h, gts[g].cx, gts[g].cy, gts[g].w, gts[g].h);
      if (iou >= thr && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      match[k] = best;
    }
  }
  if (order_out != nullptr) *order_out = std::move(order);
  return match;
}

int neighbor_count(const std::vector<std::uint8_t>& img, int w, int h, int x, int y) {
  int n = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      if (dx == 0 && dy == 0) continue;
      const int nx = x + dx, ny = y + dy;
      if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
      n += img[static_cast<std::size_t>(ny) * w + nx] != 0;
    }
  }
  return n;
}

// Yokoi connectivity number for 8-connected foreground: the pixel is simple
// (deletable without changing topology) iff this equals 1.
int connectivity8(const std::vector<std::uint8_t>& img, int w, int h, int x, int y) {
  // Ring order E, NE, N, NW, W, SW, S, SE (x1..x8), zero outside the image.
  static constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
  static constexpr int kDy[8] = {0, -1, -1, -1, 0, 1, 1, 1};
  int v[8];
  for (int k = 0; k < 8; ++k) {
    const int nx = x + kDx[k], ny = y + kDy[k];
    v[k] = (nx < 0 || ny < 0 || nx >= w || ny >= h)
               ? 0
               : img[static_cast<std::size_t>(ny) * w + nx] != 0;
  }
  int c = 0;
  for (int k = 0; k < 8; k += 2) {
    const int a = 1 - v[k], b = 1 - v[(k + 1) % 8], d = 1 - v[(k + 2) % 8];
    c += a - a * b * d;
  }
  return c;
}

bool has_full_2x2(const std::vector<std::uint8_t>& img, int w, int h, int* bx, int* by) {
  for (int y = 0; y + 1 < h; ++y) {
    for (int x = 0; x + 1 < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (img[i] && img[i + 1] && img[i + w] && img[i + w + 1]) {
        if (bx != nullptr) *bx = x;
        if (by != nullptr) *by = y;
        return true;
      }
    }
  }
  return false;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

std::string format_px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.50 + 0.05 * k);
  return t;
}

double box_iou(double acx, double acy, double aw, double ah, double bcx, double bcy,
               double bw, double bh) {
  aw = std::max(aw, 0.0);
  ah = std::max(ah, 0.0);
  bw = std::max(bw, 0.0);
  bh = std::max(bh, 0.0);
  const double ix = std::max(
      0.0, std::min(acx + aw / 2, bcx + bw / 2) - std::max(acx - aw / 2, bcx - bw / 2));
  const double iy = std::max(
      0.0, std::min(acy + ah / 2, bcy + bh / 2) - std::max(acy - ah / 2, bcy - bh / 2));
  const double inter = ix * iy;
  const double uni = aw * ah + bw * bh - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::vector<Detection>> decode_detections(const Tensor& center_logits,
                                                      const Tensor& size_pred,
                                                      int max_det, int stride) {
  const Shape& cs = center_logits.shape();
  const Shape& ss = size_pred.shape();
  if (cs.size() != 4 || cs[1] != 1) {
    throw std::invalid_argument("decode: center logits must be [B, 1, gh, gw], got " +
                                shape_str(cs));
  }
  if (ss.size() != 4 || ss[0] != cs[0] || ss[1] != 2 || ss[2] != cs[2] || ss[3] != cs[3]) {
    throw std::invalid_argument("decode: size prediction must be [B, 2, gh, gw], got " +
                                shape_str(ss));
  }
  if (max_det < 1) throw std::invalid_argument("decode: max_det must be >= 1");
  if (stride < 1) throw std::invalid_argument("decode: stride must be >= 1");

  const int b = static_cast<int>(cs[0]);
  const int gh = static_cast<int>(cs[2]);
  const int gw = static_cast<int>(cs[3]);
  const std::int64_t plane = static_cast<std::int64_t>(gh) * gw;
  const double* logits = center_logits.data();
  const double* sizes = size_pred.data();

  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(b));
  std::vector<double> prob(static_cast<std::size_t>(plane));
  for (int s = 0; s < b; ++s) {
    const double* z = logits + static_cast<std::int64_t>(s) * plane;
    for (std::int64_t i = 0; i < plane; ++i) prob[static_cast<std::size_t>(i)] = sigmoid(z[i]);

    // 3x3 suppression: survive iff strictly above every earlier-in-scan
    // neighbor and at least every later one, so ties keep the first cell.
    std::vector<std::pair<double, std::int64_t>> peaks;  // (-score used via sort)
    for (int y = 0; y < gh; ++y) {
      for (int x = 0; x < gw; ++x) {
        const std::int64_t i = static_cast<std::int64_t>(y) * gw + x;
        const double v = prob[static_cast<std::size_t>(i)];
        if (v < kMinPeakScore) continue;
        bool keep = true;
        for (int dy = -1; dy <= 1 && keep; ++dy) {
          for (int dx = -1; dx <= 1 && keep; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int nx = x + dx, ny = y + dy;
            if (nx < 0 || ny < 0 || nx >= gw || ny >= gh) continue;
            const std::int64_t j = static_cast<std::int64_t>(ny) * gw + nx;
            const double u = prob[static_cast<std::size_t>(j)];
            keep = j < i ? v > u : v >= u;
          }
        }
        if (keep) peaks.emplace_back(v, i);
      }
    }
    std::stable_sort(peaks.begin(), peaks.end(),
                     [](const auto& a, const auto& b2) { return a.first > b2.first; });
    if (static_cast<int>(peaks.size()) > max_det) peaks.resize(static_cast<std::size_t>(max_det));

    for (const auto& [score, i] : peaks) {
      const int y = static_cast<int>(i / gw);
      const int x = static_cast<int>(i % gw);
      double ox = 0.0, oy = 0.0;
      if (x > 0 && x + 1 < gw) {
        ox = parabolic_offset(log_sigmoid(z[i - 1]), log_sigmoid(z[i]),
                              log_sigmoid(z[i + 1]));
      }
      if (y > 0 && y + 1 < gh) {
        oy = parabolic_offset(log_sigmoid(z[i - gw]), log_sigmoid(z[i]),
                              log_sigmoid(z[i + gw]));
      }
      Detection d;
      d.cx = (x + ox) * stride;
      d.cy = (y + oy) * stride;
      d.w = std::max(sizes[static_cast<std::int64_t>(s) * 2 * plane + i], 0.0);
      d.h = std::max(sizes[static_cast<std::int64_t>(s) * 2 * plane + plane + i], 0.0);
      d.score = score;
      out[static_cast<std::size_t>(s)].push_back(d);
    }
  }
  return out;
}

double average_precision(const std::vector<Detection>& dets,
                         const std::vector<ElectrodeBox>& gts,
                         const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw std::invalid_argument("average_precision: no thresholds");
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;

  double total = 0.0;
  for (const double thr : thresholds) {
    const std::vector<int> match = greedy_match(dets, gts, thr, nullptr);
    // Precision/recall after each detection in score order.
    std::vector<double> prec(dets.size()), rec(dets.size());
    int tp = 0;
    for (std::size_t k = 0; k < match.size(); ++k) {
      tp += match[k] >= 0;
      prec[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
      rec[k] = static_cast<double>(tp) / static_cast<double>(gts.size());
    }
    // 101-point interpolation: mean over r of the best precision at recall >= r.
    double ap = 0.0;
    for (int j = 0; j <= 100; ++j) {
      const double r = j / 100.0;
      double best = 0.0;
      for (std::size_t k = 0; k < dets.size(); ++k) {
        if (rec[k] >= r - 1e-12) best = std::max(best, prec[k]);
      }
      ap += best;
    }
    total += ap / 101.0;
  }
  return total / static_cast<double>(thresholds.size());
}

double region_similarity(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("region_similarity: mask sizes differ (" +
                                std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()) + ")");
  }
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  const double j = region_similarity(pred, gt);
  return 2.0 * j / (1.0 + j);
}

LocErrors localization_errors(const std::vector<Detection>& dets,
                              const std::vector<ElectrodeBox>& gts, double penalty_px) {
  LocErrors e;
  if (gts.empty()) return e;
  std::vector<std::size_t> order;
  const std::vector<int> match = greedy_match(dets, gts, 0.5, &order);
  std::vector<double> err(gts.size(), penalty_px);
  for (std::size_t k = 0; k < match.size(); ++k) {
    if (match[k] < 0) continue;
    const Detection& d = dets[order[k]];
    const ElectrodeBox& g = gts[static_cast<std::size_t>(match[k])];
    err[static_cast<std::size_t>(match[k])] = std::hypot(d.cx - g.cx, d.cy - g.cy);
  }
  double sum = 0.0, sq = 0.0;
  for (const double v : err) {
    sum += v;
    sq += v * v;
  }
  e.mae = sum / static_cast<double>(err.size());
  e.rmse = std::sqrt(sq / static_cast<double>(err.size()));
  return e;
}

std::vector<std::uint8_t> skeletonize(const std::vector<std::uint8_t>& mask, int w, int h) {
  if (w < 0 || h < 0 || mask.size() != static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
    throw std::invalid_argument("skeletonize: mask size does not match " +
                                std::to_string(w) + "x" + std::to_string(h));
  }
  std::vector<std::uint8_t> img(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) img[i] = mask[i] != 0;

  // Sequential directional thinning: peel border pixels whose removal keeps
  // the local topology (connectivity number 1) and that are not endpoints.
  static constexpr int kDirDx[4] = {0, 0, -1, 1};  // N, S, W, E
  static constexpr int kDirDy[4] = {-1, 1, 0, 0};
  bool changed = true;
  while (changed) {
    changed = false;
    for (int dir = 0; dir < 4; ++dir) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          if (!img[i]) continue;
          const int nx = x + kDirDx[dir], ny = y + kDirDy[dir];
          const bool border = nx < 0 || ny < 0 || nx >= w || ny >= h ||
                              !img[static_cast<std::size_t>(ny) * w + nx];
          if (!border) continue;
          if (neighbor_count(img, w, h, x, y) < 2) continue;
          if (connectivity8(img, w, h, x, y) != 1) continue;
          img[i] = 0;
          changed = true;
        }
      }
    }
  }

  // Remove any residual fully-set 2x2 block, still only via simple points.
  int bx = 0, by = 0;
  while (has_full_2x2(img, w, h, &bx, &by)) {
    bool removed = false;
    for (int k = 0; k < 4 && !removed; ++k) {
      const int x = bx + (k & 1), y = by + (k >> 1);
      if (connectivity8(img, w, h, x, y) != 1) continue;
      img[static_cast<std::size_t>(y) * w + x] = 0;
      removed = true;
    }
    if (!removed) break;  // no simple pixel in the block; keep topology intact
  }
  return img;
}

void write_report_json(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << "{\n";
  out << "  \"ap\": " << format_percent(report.ap) << ",\n";
  out << "  \"mean_j\": " << format_percent(report.mean_j) << ",\n";
  out << "  \"mean_kpi\": " << format_percent(report.mean_kpi) << ",\n";
  out << "  \"mae_px\": " << format_px(report.mae_px) << ",\n";
  out << "  \"rmse_px\": " << format_px(report.rmse_px) << ",\n";
  out << "  \"n_samples\": " << report.per_sample.size() << "\n";
  out << "}\n";
  if (!out.flush()) throw std::runtime_error("cannot write report: " + path);
}

void write_per_sample_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write per-sample csv: " + path);
  out << "id,ap50,j,mae,rmse\n";
  char buf[160];
  for (const PerSampleEval& s : report.per_sample) {
    std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%.6f\n", s.ap50, s.j, s.mae, s.rmse);
    out << s.id << buf;
  }
  if (!out.flush()) throw std::runtime_error("cannot write per-sample csv: " + path);
}

}  // namespace fluorotask
