#pragma once

// Simulated computation delays on an integer tick clock.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tstream/strategy.hpp"

namespace tstream::sim {

using strategy::ComponentDelays;

// Virtual time unit: 1/1000 of a frame period.
inline constexpr std::int64_t kTicksPerFrame = 1000;

inline std::int64_t frame_ticks(int frame) { return static_cast<std::int64_t>(frame) * kTicksPerFrame; }
double ticks_to_seconds(std::int64_t ticks, double frame_rate);
std::int64_t seconds_to_ticks(double seconds, double frame_rate);
// Smallest frame index whose arrival is at or after `ticks` (ticks >= 0).
int first_frame_at_or_after(std::int64_t ticks);

struct DelayTicks {
  std::int64_t backbone = 0;
  std::int64_t neck = 0;
  std::int64_t head = 0;
  std::int64_t other = 0;

  std::int64_t total() const { return backbone + neck + head + other; }
  bool operator==(const DelayTicks&) const = default;
};

enum class DelayKind { kConstant, kTable, kBurst };

std::string to_string(DelayKind kind);
DelayKind delay_kind_from_string(const std::string& name);  // ConfigError on unknown

struct DelaySpec {
  DelayKind kind = DelayKind::kConstant;
  ComponentDelays base{0.014, 0.008, 0.003, 0.002};  // seconds; 27 ms total
  std::vector<ComponentDelays> table;                // kTable: rows used cyclically
  double burst_prob = 0.2;                           // kBurst
  double burst_scale = 2.0;
  double jitter = 0.0;  // each component scaled by 1 + U(-jitter, jitter)
  double factor = 1.0;  // delay factor d, applied to the tick-quantised sample

  // Throws ConfigError.
  void validate() const;
  bool operator==(const DelaySpec&) const = default;
};

class DelayModel {
 public:
  DelayModel(DelaySpec spec, double frame_rate, std::uint64_t seed);

  // Per-loop sample: quantised to ticks, then multiplied by the factor.
  DelayTicks sample();
  const DelaySpec& spec() const { return spec_; }

 private:
  DelaySpec spec_;
  double frame_rate_;
  std::mt19937_64 rng_;
  std::size_t row_ = 0;
};

}  // namespace tstream::sim
