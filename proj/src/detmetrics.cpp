#include "tstream/detmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "tstream/errors.hpp"

namespace tstream::metrics {

void validate(const BBox& box) {
  if (!(box.x_min < box.x_max) || !(box.y_min < box.y_max)) {
    throw GeometryError("degenerate box [" + std::to_string(box.x_min) + "," +
                        std::to_string(box.y_min) + "," + std::to_string(box.x_max) + "," +
                        std::to_string(box.y_max) + "]");
  }
  if (box.score && !(*box.score >= 0.0 && *box.score <= 1.0)) {
    throw GeometryError("box score outside [0,1]: " + std::to_string(*box.score));
  }
}

namespace {

double score_of(const BBox& b) { return b.score.value_or(-1.0); }

std::vector<std::size_t> score_order(const DetectionSet& set) {
  std::vector<std::size_t> order(set.boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score_of(set.boxes[a]) > score_of(set.boxes[b]);
  });
  return order;
}

// ious[p * n_gt + g]
std::vector<double> iou_matrix(const DetectionSet& preds, const DetectionSet& gts) {
  std::vector<double> out(preds.boxes.size() * gts.boxes.size(), 0.0);
  for (std::size_t p = 0; p < preds.boxes.size(); ++p) {
    for (std::size_t g = 0; g < gts.boxes.size(); ++g) {
      if (preds.boxes[p].class_id != gts.boxes[g].class_id) continue;
      out[p * gts.boxes.size() + g] = iou(preds.boxes[p], gts.boxes[g]);
    }
  }
  return out;
}

MatchResult match_with(const DetectionSet& preds, const DetectionSet& gts,
                       const std::vector<std::size_t>& order, const std::vector<double>& ious,
                       double threshold, AreaRange range) {
  const std::size_t n_gt = gts.boxes.size();
  MatchResult r;
  r.pred_to_gt.assign(preds.boxes.size(), std::nullopt);
  r.pred_ignored.assign(preds.boxes.size(), false);
  r.gt_matched.assign(n_gt, false);
  r.gt_ignored.assign(n_gt, false);
  for (std::size_t g = 0; g < n_gt; ++g) r.gt_ignored[g] = !range.contains(gts.boxes[g].area());

  for (std::size_t p : order) {
    const auto& pb = preds.boxes[p];
    std::optional<std::size_t> best;
    double best_iou = threshold;
    // Non-ignored gts take precedence over ignored ones.
    for (bool want_ignored : {false, true}) {
      for (std::size_t g = 0; g < n_gt; ++g) {
        if (r.gt_ignored[g] != want_ignored || r.gt_matched[g]) continue;
        if (gts.boxes[g].class_id != pb.class_id) continue;
        const double v = ious[p * n_gt + g];
        if (v >= best_iou && (!best || v > best_iou)) {
          best = g;
          best_iou = v;
        }
      }
      if (best) break;
    }
    if (best) {
      r.pred_to_gt[p] = best;
      r.gt_matched[*best] = true;
      r.pred_ignored[p] = r.gt_ignored[*best];
    } else {
      r.pred_ignored[p] = !range.contains(pb.area());
    }
  }
  return r;
}

}  // namespace

void sort_by_score(DetectionSet& set) {
  std::stable_sort(set.boxes.begin(), set.boxes.end(),
                   [](const BBox& a, const BBox& b) { return score_of(a) > score_of(b); });
}

double iou(const BBox& a, const BBox& b) {
  validate(a);
  validate(b);
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<std::size_t> MatchResult::unmatched_gts() const {
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < gt_matched.size(); ++g) {
    if (!gt_matched[g]) out.push_back(g);
  }
  return out;
}

MatchResult match_greedy(const DetectionSet& preds, const DetectionSet& gts, double iou_threshold,
                         AreaRange range) {
  return match_with(preds, gts, score_order(preds), iou_matrix(preds, gts), iou_threshold, range);
}

APValue average_precision(std::span<const ScoredOutcome> outcomes, std::size_t num_gt) {
  if (num_gt == 0) return {0.0, true};
  std::vector<std::size_t> order(outcomes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return outcomes[a].score > outcomes[b].score;
  });

  std::vector<double> recall(order.size()), precision(order.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (outcomes[order[i]].true_positive) ++tp;
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Precision envelope: non-increasing from the right.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }

  double total = 0.0;
  for (int step = 0; step <= 100; ++step) {
    const double r = static_cast<double>(step) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return {total / 101.0, false};
}

namespace {

struct ClassPool {
  std::vector<ScoredOutcome> outcomes;
  std::size_t num_gt = 0;
};

struct PreparedFrame {
  std::vector<std::size_t> order;
  std::vector<double> ious;
};

APValue pooled_map(std::span<const FramePair> frames, std::span<const PreparedFrame> prepared,
                   double threshold, AreaRange range) {
  std::map<int, ClassPool> pools;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& fp = frames[f];
    const auto m = match_with(fp.predictions, fp.ground_truth, prepared[f].order,
                              prepared[f].ious, threshold, range);
    for (std::size_t g = 0; g < fp.ground_truth.boxes.size(); ++g) {
      if (!m.gt_ignored[g]) ++pools[fp.ground_truth.boxes[g].class_id].num_gt;
    }
    for (std::size_t p : prepared[f].order) {
      if (m.pred_ignored[p]) continue;
      const auto& b = fp.predictions.boxes[p];
      pools[b.class_id].outcomes.push_back({score_of(b), m.pred_to_gt[p].has_value()});
    }
  }
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& [cls, pool] : pools) {
    if (pool.num_gt == 0) continue;
    total += average_precision(pool.outcomes, pool.num_gt).ap;
    ++counted;
  }
  if (counted == 0) return {0.0, true};
  return {total / static_cast<double>(counted), false};
}

std::vector<PreparedFrame> prepare(std::span<const FramePair> frames) {
  std::vector<PreparedFrame> out;
  out.reserve(frames.size());
  for (const auto& fp : frames) {
    out.push_back({score_order(fp.predictions), iou_matrix(fp.predictions, fp.ground_truth)});
  }
  return out;
}

}  // namespace

APValue mean_average_precision(std::span<const FramePair> frames, double iou_threshold,
                               AreaRange range) {
  const auto prepared = prepare(frames);
  return pooled_map(frames, prepared, iou_threshold, range);
}

std::vector<int> coco_thresholds_percent() {
  std::vector<int> out;
  for (int t = 50; t <= 95; t += 5) out.push_back(t);
  return out;
}

APReport aggregate_coco(const std::map<int, double>& per_threshold, const SizeBuckets& sizes) {
  APReport report;
  double total = 0.0;
  for (int t : coco_thresholds_percent()) {
    const auto it = per_threshold.find(t);
    if (it == per_threshold.end()) {
      throw ConfigError("aggregate_coco: missing AP for IoU threshold 0." + std::to_string(t));
    }
    report.ap_per_iou[t] = it->second;
    total += it->second;
  }
  report.ap_mean = total / static_cast<double>(report.ap_per_iou.size());
  report.ap_small = sizes.small;
  report.ap_medium = sizes.medium;
  report.ap_large = sizes.large;
  return report;
}

APReport evaluate_coco(std::span<const FramePair> frames) {
  const auto prepared = prepare(frames);
  std::map<int, double> per_threshold;
  bool no_gt = false;
  for (int t : coco_thresholds_percent()) {
    const auto v = pooled_map(frames, prepared, t / 100.0, kAllAreas);
    per_threshold[t] = v.ap;
    no_gt = v.no_ground_truth;
  }
  auto bucket = [&](AreaRange range) {
    double total = 0.0;
    for (int t : coco_thresholds_percent()) total += pooled_map(frames, prepared, t / 100.0, range).ap;
    return total / 10.0;
  };
  auto report = aggregate_coco(per_threshold, {bucket(kSmall), bucket(kMedium), bucket(kLarge)});
  report.no_ground_truth = no_gt;
  return report;
}

}  // namespace tstream::metrics
