#include "tstream/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "tstream/errors.hpp"

namespace tstream::strategy {

namespace {

// Absorbs representation error in products like 0.1 * 30 before ceil/round.
constexpr double kFrameEps = 1e-9;

void require_non_negative(double v, const char* what) {
  if (!(v >= 0.0)) throw ContractError(std::string("negative or NaN delay for ") + what);
}

}  // namespace

DelayEstimate ema_update(const std::optional<DelayEstimate>& previous,
                         const ComponentDelays& observed, double decay) {
  require_non_negative(observed.backbone, "backbone");
  require_non_negative(observed.neck, "neck");
  require_non_negative(observed.head, "head");
  require_non_negative(observed.other, "other");
  DelayEstimate out;
  if (!previous) {
    out.components = observed;
    return out;
  }
  const auto& p = previous->components;
  auto mix = [decay](double prev, double obs) { return decay * prev + (1.0 - decay) * obs; };
  out.components = {mix(p.backbone, observed.backbone), mix(p.neck, observed.neck),
                    mix(p.head, observed.head), mix(p.other, observed.other)};
  out.startup = previous->startup;
  return out;
}

void PlannerConfig::validate() const {
  if (max_past < 1 || max_future < 1) throw ConfigError("planner.max_past/max_future must be >= 1");
  if (!(clip_min < 0 && clip_max > 0)) throw ConfigError("planner clip bounds must satisfy min < 0 < max");
  if (!(frame_rate > 0.0)) throw ConfigError("planner.frame_rate must be > 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("planner.ema_decay must be in [0,1)");
  if (peak_window < 1) throw ConfigError("planner.peak_window must be >= 1");
}

void DelayTracker::observe(const ComponentDelays& observed) {
  estimate_ = ema_update(estimate_, observed, cfg_.ema_decay);
  recent_.push_back(observed.total());
  while (recent_.size() > cfg_.peak_window) recent_.pop_front();
}

DelayEstimate DelayTracker::estimate(double startup) const {
  DelayEstimate e = estimate_.value_or(DelayEstimate{});
  e.startup = startup;
  return e;
}

FeatureBuffer::FeatureBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("feature buffer capacity must be >= 1");
}

void FeatureBuffer::push(int index, FeatureMap feature) {
  if (!entries_.empty() && index <= entries_.rbegin()->first) {
    throw ContractError("feature buffer push of index " + std::to_string(index) +
                        " after index " + std::to_string(entries_.rbegin()->first));
  }
  entries_.emplace(index, std::move(feature));
  while (entries_.size() > capacity_) entries_.erase(entries_.begin());
}

std::vector<int> FeatureBuffer::indices() const {
  std::vector<int> out;
  for (const auto& [i, f] : entries_) out.push_back(i);
  return out;
}

const FeatureMap& FeatureBuffer::at(int index) const {
  const auto it = entries_.find(index);
  if (it == entries_.end()) throw ContractError("feature buffer has no index " + std::to_string(index));
  return it->second;
}

Plan plan(const std::vector<int>& buffered, const DelayEstimate& estimate, int now_frame,
          const PlannerConfig& cfg, const std::deque<double>& recent_totals) {
  cfg.validate();
  const double k = cfg.frame_rate;
  Plan out;

  std::set<int> past;
  for (auto it = buffered.rbegin(); it != buffered.rend(); ++it) {
    if (*it >= now_frame) throw ContractError("buffered index not before the current frame");
    if (past.size() == cfg.max_past) break;
    const int rel = *it - now_frame;
    if (rel >= cfg.clip_min) past.insert(rel);
  }
  if (past.empty()) {
    past.insert(-1);
    out.synthetic_past = true;
  }

  const double lead = (estimate.total() + estimate.startup) * k;
  const int first = std::max(1, static_cast<int>(std::ceil(lead - kFrameEps)));
  double stride_delay = estimate.total();
  if (cfg.stride == StrideRule::kRecentPeak && !recent_totals.empty()) {
    stride_delay = *std::max_element(recent_totals.begin(), recent_totals.end());
  }
  const int stride = std::max(1, static_cast<int>(std::lround(stride_delay * k - kFrameEps)));
  std::set<int> future;
  for (std::size_t n = 0; n < cfg.max_future; ++n) {
    const long target = static_cast<long>(first) + static_cast<long>(n) * stride;
    future.insert(static_cast<int>(std::clamp<long>(target, 1, cfg.clip_max)));
  }
  out.proposal.past.assign(past.begin(), past.end());
  out.proposal.future.assign(future.begin(), future.end());
  return out;
}

Plan plan(const FeatureBuffer& buffer, const DelayEstimate& estimate, int now_frame,
          const PlannerConfig& cfg, const std::deque<double>& recent_totals) {
  return plan(buffer.indices(), estimate, now_frame, cfg, recent_totals);
}

void OutputBuffer::push(const std::vector<std::pair<int, metrics::DetectionSet>>& predictions) {
  std::set<int> seen;
  for (const auto& [target, set] : predictions) {
    if (!seen.insert(target).second) {
      throw ContractError("output buffer push repeats target " + std::to_string(target));
    }
  }
  for (const auto& [target, set] : predictions) entries_[target] = set;
}

std::optional<std::pair<int, metrics::DetectionSet>> OutputBuffer::dispatch(int q) {
  if (entries_.empty()) return std::nullopt;
  auto best = entries_.end();
  long best_gap = 0;
  for (auto it = entries_.begin(); it != entries_.end(); ++it) {
    const long gap = std::labs(static_cast<long>(it->first) - q);
    // Ascending keys: `<=` lets the later target win ties.
    if (best == entries_.end() || gap <= best_gap) {
      best = it;
      best_gap = gap;
    }
  }
  std::pair<int, metrics::DetectionSet> out = *best;
  if (best->first <= q) entries_.erase(best);
  return out;
}

}  // namespace tstream::strategy
