#pragma once

// Adaptive strategy: delay estimation, temporal-proposal planning and the
// feature / output buffers that sit around the detector.

#include <cstddef>
#include <deque>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "tstream/detmetrics.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::strategy {

using model::FeatureMap;
using model::TemporalProposal;

// Per-loop component delays, seconds.
struct ComponentDelays {
  double backbone = 0.0;
  double neck = 0.0;
  double head = 0.0;
  double other = 0.0;

  double total() const { return backbone + neck + head + other; }
  bool operator==(const ComponentDelays&) const = default;
};

struct DelayEstimate {
  ComponentDelays components;
  double startup = 0.0;  // measured for the loop being planned

  double total() const { return components.total(); }
};

// new = decay * previous + (1 - decay) * observed per component; the first
// observation is adopted as is. Throws ContractError on negative input.
DelayEstimate ema_update(const std::optional<DelayEstimate>& previous,
                         const ComponentDelays& observed, double decay = 0.5);

enum class StrideRule {
  kEstimate,    // max(1, round(estimate.total * k))
  kRecentPeak,  // max(1, round(max recent observed total * k))
};

struct PlannerConfig {
  std::size_t max_past = 4;
  std::size_t max_future = 4;
  int clip_min = -29;  // frame units
  int clip_max = 19;
  double frame_rate = 30.0;
  double ema_decay = 0.5;
  StrideRule stride = StrideRule::kEstimate;
  std::size_t peak_window = 4;  // loops considered by kRecentPeak

  // Throws ConfigError unless clip_min < 0 < clip_max, counts >= 1, k > 0 and
  // decay in [0, 1).
  void validate() const;
};

// Running EMA plus the recent totals used by kRecentPeak.
class DelayTracker {
 public:
  explicit DelayTracker(const PlannerConfig& cfg) : cfg_(cfg) {}

  void observe(const ComponentDelays& observed);
  bool ready() const { return estimate_.has_value(); }
  // Zero estimate before the first observation.
  DelayEstimate estimate(double startup) const;
  const std::deque<double>& recent_totals() const { return recent_; }

 private:
  PlannerConfig cfg_;
  std::optional<DelayEstimate> estimate_;
  std::deque<double> recent_;
};

// Absolute frame index -> features, oldest first.
class FeatureBuffer {
 public:
  explicit FeatureBuffer(std::size_t capacity);

  // Throws ContractError unless index exceeds every stored index. Evicts the
  // smallest index when over capacity.
  void push(int index, FeatureMap feature);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  std::vector<int> indices() const;
  const FeatureMap& at(int index) const;

 private:
  std::size_t capacity_;
  std::map<int, FeatureMap> entries_;
};

struct Plan {
  TemporalProposal proposal;
  bool synthetic_past = false;  // past={-1} stands in for F_0 (nothing usable buffered)
};

// past: the max_past most recent buffered indices relative to now_frame,
// ignoring any older than clip_min (empty => synthetic {-1});
// future: f1 = max(1, ceil((total + startup) * k)), then stride steps up to
// max_future entries; everything clipped to [clip_min, clip_max] and
// deduplicated. `recent_totals` feeds StrideRule::kRecentPeak.
Plan plan(const std::vector<int>& buffered, const DelayEstimate& estimate, int now_frame,
          const PlannerConfig& cfg, const std::deque<double>& recent_totals = {});
Plan plan(const FeatureBuffer& buffer, const DelayEstimate& estimate, int now_frame,
          const PlannerConfig& cfg, const std::deque<double>& recent_totals = {});

// Target absolute frame -> predictions; latest write wins.
class OutputBuffer {
 public:
  // Throws ContractError on a repeated target within one call.
  void push(const std::vector<std::pair<int, metrics::DetectionSet>>& predictions);

  // Entry nearest to q, ties toward the later target. A returned entry with
  // target <= q is retired; later targets stay for future queries.
  std::optional<std::pair<int, metrics::DetectionSet>> dispatch(int q);

  std::size_t size() const { return entries_.size(); }
  const std::map<int, metrics::DetectionSet>& entries() const { return entries_; }

 private:
  std::map<int, metrics::DetectionSet> entries_;
};

}  // namespace tstream::strategy
