#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace tstream::metrics {

// Axis-aligned box in continuous pixel coordinates. Ground truth carries no score.
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  int class_id = 0;
  std::optional<double> score;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool operator==(const BBox&) const = default;
};

// Throws GeometryError unless x_min < x_max, y_min < y_max and score in [0,1].
void validate(const BBox& box);

struct DetectionSet {
  int frame_index = 0;
  std::vector<BBox> boxes;

  bool operator==(const DetectionSet&) const = default;
};

// Stable descending score order; unscored boxes sort last.
void sort_by_score(DetectionSet& set);

double iou(const BBox& a, const BBox& b);

// Half-open gt-area interval [lo, hi).
struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double area) const { return area >= lo && area < hi; }
};

inline constexpr AreaRange kAllAreas{};
inline constexpr AreaRange kSmall{0.0, 32.0 * 32.0};
inline constexpr AreaRange kMedium{32.0 * 32.0, 96.0 * 96.0};
inline constexpr AreaRange kLarge{96.0 * 96.0, std::numeric_limits<double>::infinity()};

// Outcome of greedy matching for one frame. Indices refer to the input order.
struct MatchResult {
  std::vector<std::optional<std::size_t>> pred_to_gt;
  std::vector<bool> pred_ignored;  // excluded from AP (outside area range)
  std::vector<bool> gt_matched;
  std::vector<bool> gt_ignored;

  std::vector<std::size_t> unmatched_gts() const;
};

// Predictions are visited in descending score order (ties keep input order);
// each takes the highest-IoU unmatched same-class gt with IoU >= threshold.
// Gts outside `range` are "ignored": a prediction landing on one, or an
// unmatched prediction whose own area is outside the range, is dropped from AP.
MatchResult match_greedy(const DetectionSet& preds, const DetectionSet& gts, double iou_threshold,
                         AreaRange range = kAllAreas);

struct ScoredOutcome {
  double score = 0.0;
  bool true_positive = false;
};

struct APValue {
  double ap = 0.0;
  bool no_ground_truth = false;
};

// 101-point interpolated AP for one class over outcomes pooled from any number
// of frames. Outcomes are ranked by descending score, ties by input order.
APValue average_precision(std::span<const ScoredOutcome> outcomes, std::size_t num_gt);

// One scored frame: a prediction set paired with a ground-truth set.
struct FramePair {
  DetectionSet predictions;
  DetectionSet ground_truth;
};

// Class-mean AP over pooled frames at one IoU threshold and area range. Classes
// without ground truth are excluded from the mean; when no class has any, the
// result is 0 with no_ground_truth set.
APValue mean_average_precision(std::span<const FramePair> frames, double iou_threshold,
                               AreaRange range = kAllAreas);

// IoU thresholds 0.50:0.05:0.95, keyed in percent.
std::vector<int> coco_thresholds_percent();

struct SizeBuckets {
  double small = 0.0;
  double medium = 0.0;
  double large = 0.0;
};

struct APReport {
  std::map<int, double> ap_per_iou;  // threshold in percent -> AP
  double ap_mean = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  bool no_ground_truth = false;

  double ap50() const { return ap_per_iou.at(50); }
  double ap75() const { return ap_per_iou.at(75); }
};

// Throws ConfigError if any COCO threshold is missing.
APReport aggregate_coco(const std::map<int, double>& per_threshold, const SizeBuckets& sizes);

// Full COCO-style evaluation of pooled frames.
APReport evaluate_coco(std::span<const FramePair> frames);

}  // namespace tstream::metrics
