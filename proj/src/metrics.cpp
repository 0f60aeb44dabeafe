#include "ikdmil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "ikdmil/common.hpp"
#include "ikdmil/segmodel.hpp"

namespace ikdmil {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

void MetricsConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("metrics threshold must lie in (0,1), got " + std::to_string(threshold));
  }
  if (!(both_empty_score >= 0.0 && both_empty_score <= 1.0)) {
    throw ConfigError("both_empty_score must lie in [0,1]");
  }
  if (empty_pred_penalty.has_value() && *empty_pred_penalty < 0.0) {
    throw ConfigError("empty_pred_penalty must be non-negative");
  }
}

BinaryMask binarize(const ProbMap& map, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw PreconditionError("binarize threshold must lie in (0,1), got " +
                            std::to_string(threshold));
  }
  BinaryMask out(map.h, map.w);
  for (size_t i = 0; i < map.v.size(); ++i) {
    out.v[i] = map.v[i] >= threshold ? 1 : 0;
  }
  return out;
}

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.h != b.h || a.w != b.w) {
    throw ShapeError(std::string(what) + ": mask shapes differ (" + std::to_string(a.h) + "x" +
                     std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                     std::to_string(b.w) + ")");
  }
}

}  // namespace

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt, "confusion_counts");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    if (p && g)
      ++c.tp;
    else if (p && !g)
      ++c.fp;
    else if (!p && g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double f1_score(const BinaryMask& pred, const BinaryMask& gt, const MetricsConfig& cfg) {
  const ConfusionCounts c = confusion_counts(pred, gt);
  const uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return cfg.both_empty_score;
  return 2.0 * double(c.tp) / double(denom);
}

double iou_score(const BinaryMask& pred, const BinaryMask& gt, const MetricsConfig& cfg) {
  const ConfusionCounts c = confusion_counts(pred, gt);
  const uint64_t uni = c.tp + c.fp + c.fn;
  if (uni == 0) return cfg.both_empty_score;
  return double(c.tp) / double(uni);
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < mask.h; ++r) {
    for (int c = 0; c < mask.w; ++c) {
      if (mask.at(r, c) == 0) continue;
      const bool edge = r == 0 || c == 0 || r == mask.h - 1 || c == mask.w - 1;
      const bool exposed = edge || mask.at(r - 1, c) == 0 || mask.at(r + 1, c) == 0 ||
                           mask.at(r, c - 1) == 0 || mask.at(r, c + 1) == 0;
      if (exposed) out.emplace_back(r, c);
    }
  }
  return out;
}

namespace {

// 1-D squared-distance transform via the lower envelope of parabolas.
void dt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
           std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;  // parabola at +inf never contributes
    double s;
    while (true) {
      const int p = v[k];
      if (f[p] == kInf) {
        // the only retained parabola so far is inert; replace it outright
        s = -kInf;
        --k;
        break;
      }
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const int p = v[k];
    d[q] = f[p] == kInf ? kInf : double(q - p) * (q - p) + f[p];
  }
}

}  // namespace

Grid<double> distance_to_sites(const std::vector<std::pair<int, int>>& sites, int h, int w) {
  if (h < 1 || w < 1) throw PreconditionError("distance_to_sites on empty grid");
  Grid<double> sq(h, w);
  std::fill(sq.v.begin(), sq.v.end(), kInf);
  for (const auto& [r, c] : sites) {
    if (r < 0 || r >= h || c < 0 || c >= w) {
      throw PreconditionError("site (" + std::to_string(r) + "," + std::to_string(c) +
                              ") outside " + std::to_string(h) + "x" + std::to_string(w) +
                              " grid");
    }
    sq.at(r, c) = 0.0;
  }
  {
    std::vector<double> f(h), d(h), z(h + 1);
    std::vector<int> v(h);
    for (int c = 0; c < w; ++c) {  // down each column
      for (int r = 0; r < h; ++r) f[r] = sq.at(r, c);
      dt_1d(f, d, v, z);
      for (int r = 0; r < h; ++r) sq.at(r, c) = d[r];
    }
  }
  {
    std::vector<double> f(w), d(w), z(w + 1);
    std::vector<int> v(w);
    for (int r = 0; r < h; ++r) {  // then along each row
      for (int c = 0; c < w; ++c) f[c] = sq.at(r, c);
      dt_1d(f, d, v, z);
      for (int c = 0; c < w; ++c) sq.at(r, c) = std::sqrt(d[c]);
    }
  }
  return sq;
}

std::optional<double> hausdorff_distance(const BinaryMask& pred, const BinaryMask& gt,
                                         const MetricsConfig& cfg) {
  require_same_shape(pred, gt, "hausdorff_distance");
  const std::vector<std::pair<int, int>> gt_b = boundary_pixels(gt);
  if (gt_b.empty()) return std::nullopt;
  const std::vector<std::pair<int, int>> pred_b = boundary_pixels(pred);
  if (pred_b.empty()) {
    if (cfg.empty_pred_penalty.has_value()) return *cfg.empty_pred_penalty;
    return std::hypot(double(gt.h - 1), double(gt.w - 1));
  }
  const Grid<double> d_to_gt = distance_to_sites(gt_b, gt.h, gt.w);
  const Grid<double> d_to_pred = distance_to_sites(pred_b, gt.h, gt.w);
  double hd = 0.0;
  for (const auto& [r, c] : pred_b) hd = std::max(hd, d_to_gt.at(r, c));
  for (const auto& [r, c] : gt_b) hd = std::max(hd, d_to_pred.at(r, c));
  return hd;
}

namespace {

struct Moments {
  double mean = 0.0, stddev = 0.0;
};

Moments moments(const std::vector<double>& xs) {
  Moments m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= double(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - m.mean) * (x - m.mean);
  m.stddev = std::sqrt(acc / double(xs.size()));
  return m;
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

MetricsReport evaluate_view(const EvalView& view, const MapProvider& provider,
                            const MetricsConfig& cfg) {
  cfg.validate();
  MetricsReport report;
  std::vector<double> f1s, ious, hds;
  for (size_t i = 0; i < view.size(); ++i) {
    if (!view.has_gt_mask(i)) {
      std::cerr << "warning: patch " << view.source_id(i)
                << " has no ground-truth mask; excluded from metrics\n";
      ++report.skipped_no_gt;
      continue;
    }
    const BinaryMask& gt = view.gt_mask(i);
    const ProbMap probs = provider(view.pixels(i));
    if (probs.h != gt.h || probs.w != gt.w) {
      throw ShapeError("predicted map " + std::to_string(probs.h) + "x" +
                       std::to_string(probs.w) + " does not match ground truth " +
                       std::to_string(gt.h) + "x" + std::to_string(gt.w) + " for patch " +
                       view.source_id(i));
    }
    const BinaryMask pred = binarize(probs, cfg.threshold);
    PatchMetrics pm;
    pm.id = view.source_id(i);
    pm.label = view.label(i);
    pm.f1 = f1_score(pred, gt, cfg);
    pm.iou = iou_score(pred, gt, cfg);
    pm.hausdorff = hausdorff_distance(pred, gt, cfg);
    f1s.push_back(pm.f1);
    ious.push_back(pm.iou);
    if (pm.hausdorff.has_value()) {
      hds.push_back(*pm.hausdorff);
      ++report.positive_patches;
    }
    report.per_patch.push_back(std::move(pm));
  }
  report.total_patches = report.per_patch.size();
  const Moments mf = moments(f1s), mi = moments(ious);
  report.mean_f1 = mf.mean;
  report.std_f1 = mf.stddev;
  report.mean_iou = mi.mean;
  report.std_iou = mi.stddev;
  if (!hds.empty()) {
    const Moments mh = moments(hds);
    report.mean_hd_pos = mh.mean;
    report.std_hd_pos = mh.stddev;
  }
  return report;
}

MetricsReport evaluate_dataset(const SegModel& model, const EvalView& view,
                               const MetricsConfig& cfg) {
  return evaluate_view(
      view, [&model](const Tensor& pixels) { return model.forward(pixels).fused; }, cfg);
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics CSV " + path.string());
  out << "id,label,f1,iou,hd\n";
  for (const PatchMetrics& pm : report.per_patch) {
    out << pm.id << ',' << pm.label << ',' << fmt_real(pm.f1) << ',' << fmt_real(pm.iou) << ',';
    if (pm.hausdorff.has_value()) out << fmt_real(*pm.hausdorff);
    out << '\n';
  }
  out << "summary-mean,," << fmt_real(report.mean_f1) << ',' << fmt_real(report.mean_iou) << ',';
  if (report.mean_hd_pos.has_value()) out << fmt_real(*report.mean_hd_pos);
  out << '\n';
  out << "summary-std,," << fmt_real(report.std_f1) << ',' << fmt_real(report.std_iou) << ',';
  if (report.std_hd_pos.has_value()) out << fmt_real(*report.std_hd_pos);
  out << '\n';
  if (!out.good()) throw IoError("failed while writing metrics CSV " + path.string());
}

std::string metrics_summary(const MetricsReport& report) {
  std::ostringstream os;
  char buf[160];
  if (report.mean_hd_pos.has_value()) {
    std::snprintf(buf, sizeof(buf), "F1 / IOU / HD^Pos: %.4f / %.4f / %.2f", report.mean_f1,
                  report.mean_iou, *report.mean_hd_pos);
  } else {
    std::snprintf(buf, sizeof(buf), "F1 / IOU / HD^Pos: %.4f / %.4f / n/a", report.mean_f1,
                  report.mean_iou);
  }
  os << buf << "  (patches=" << report.total_patches << ", positive=" << report.positive_patches;
  if (report.skipped_no_gt > 0) os << ", skipped=" << report.skipped_no_gt;
  os << ")";
  return os.str();
}

}  // namespace ikdmil
