#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ikdmil/data.hpp"
#include "ikdmil/tensor.hpp"

namespace ikdmil {

class SegModel;

struct MetricsConfig {
  double threshold = 0.5;       // binarization cut, value 1 iff prob >= threshold
  double both_empty_score = 1.0;  // F1/IoU when prediction and truth are both empty
  // Hausdorff penalty when truth has foreground but the prediction is empty.
  // Unset means "image diagonal".
  std::optional<double> empty_pred_penalty;

  void validate() const;
};

BinaryMask binarize(const ProbMap& map, double threshold);

struct ConfusionCounts {
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};
ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt);

double f1_score(const BinaryMask& pred, const BinaryMask& gt,
                const MetricsConfig& cfg = MetricsConfig{});
double iou_score(const BinaryMask& pred, const BinaryMask& gt,
                 const MetricsConfig& cfg = MetricsConfig{});

// Boundary = foreground pixels that touch background through 4-adjacency or
// lie on the image edge. Returned in row-major order.
std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& mask);

// Exact Euclidean distance from every cell to the nearest listed site
// (two-pass 1-D parabola sweep). Empty site list -> all +infinity.
Grid<double> distance_to_sites(const std::vector<std::pair<int, int>>& sites, int h, int w);

// Symmetric boundary Hausdorff distance in pixel units. Empty truth ->
// nullopt (undefined); non-empty truth with empty prediction -> penalty.
std::optional<double> hausdorff_distance(const BinaryMask& pred, const BinaryMask& gt,
                                         const MetricsConfig& cfg = MetricsConfig{});

struct PatchMetrics {
  std::string id;
  int label = 0;
  double f1 = 0.0;
  double iou = 0.0;
  std::optional<double> hausdorff;  // null when the truth has no foreground
};

struct MetricsReport {
  std::vector<PatchMetrics> per_patch;
  double mean_f1 = 0.0, std_f1 = 0.0;
  double mean_iou = 0.0, std_iou = 0.0;
  std::optional<double> mean_hd_pos, std_hd_pos;  // null when no positive patches
  size_t total_patches = 0;
  size_t positive_patches = 0;
  size_t skipped_no_gt = 0;
};

// Produces the fused probability map for one image; the seam lets tests and
// cached-map evaluation reuse the aggregation path.
using MapProvider = std::function<ProbMap(const Tensor& pixels)>;

MetricsReport evaluate_view(const EvalView& view, const MapProvider& provider,
                            const MetricsConfig& cfg = MetricsConfig{});
MetricsReport evaluate_dataset(const SegModel& model, const EvalView& view,
                               const MetricsConfig& cfg = MetricsConfig{});

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

// One-line "F1 / IOU / HD^Pos" style summary.
std::string metrics_summary(const MetricsReport& report);

}  // namespace ikdmil
