#include "tstream/delay.hpp"

#include <cmath>

#include "tstream/errors.hpp"

namespace tstream::sim {

double ticks_to_seconds(std::int64_t ticks, double frame_rate) {
  return static_cast<double>(ticks) / (static_cast<double>(kTicksPerFrame) * frame_rate);
}

std::int64_t seconds_to_ticks(double seconds, double frame_rate) {
  return std::llround(seconds * frame_rate * static_cast<double>(kTicksPerFrame));
}

int first_frame_at_or_after(std::int64_t ticks) {
  if (ticks < 0) throw ContractError("negative tick count");
  return static_cast<int>((ticks + kTicksPerFrame - 1) / kTicksPerFrame);
}

std::string to_string(DelayKind kind) {
  switch (kind) {
    case DelayKind::kConstant: return "constant";
    case DelayKind::kTable: return "table";
    case DelayKind::kBurst: return "burst";
  }
  return "?";
}

DelayKind delay_kind_from_string(const std::string& name) {
  if (name == "constant") return DelayKind::kConstant;
  if (name == "table") return DelayKind::kTable;
  if (name == "burst") return DelayKind::kBurst;
  throw ConfigError("unknown delay kind '" + name + "' (constant|table|burst)");
}

namespace {

void check_components(const ComponentDelays& c, const std::string& where) {
  for (double v : {c.backbone, c.neck, c.head, c.other}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(where + ": delays must be finite and >= 0");
  }
}

}  // namespace

void DelaySpec::validate() const {
  check_components(base, "delay.base");
  for (std::size_t i = 0; i < table.size(); ++i) check_components(table[i], "delay.table[" + std::to_string(i) + "]");
  if (kind == DelayKind::kTable && table.empty()) throw ConfigError("delay.table must be non-empty for kind=table");
  if (!(burst_prob >= 0.0 && burst_prob <= 1.0)) throw ConfigError("delay.burst_prob must be in [0,1]");
  if (!(burst_scale >= 0.0)) throw ConfigError("delay.burst_scale must be >= 0");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("delay.jitter must be in [0,1)");
  if (!(factor >= 1.0) || !std::isfinite(factor)) throw ConfigError("delay.factor must be >= 1");
}

DelayModel::DelayModel(DelaySpec spec, double frame_rate, std::uint64_t seed)
    : spec_(std::move(spec)), frame_rate_(frame_rate), rng_(seed) {
  spec_.validate();
  if (!(frame_rate > 0.0)) throw ConfigError("frame_rate must be > 0");
}

DelayTicks DelayModel::sample() {
  ComponentDelays c = spec_.base;
  if (spec_.kind == DelayKind::kTable) {
    c = spec_.table[row_ % spec_.table.size()];
    ++row_;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (spec_.kind == DelayKind::kBurst && unit(rng_) < spec_.burst_prob) {
    c = {c.backbone * spec_.burst_scale, c.neck * spec_.burst_scale, c.head * spec_.burst_scale,
         c.other * spec_.burst_scale};
  }
  auto quantise = [&](double seconds) {
    if (spec_.jitter > 0.0) seconds *= 1.0 + spec_.jitter * (2.0 * unit(rng_) - 1.0);
    const std::int64_t t = seconds_to_ticks(seconds, frame_rate_);
    return std::llround(static_cast<double>(t) * spec_.factor);
  };
  DelayTicks out;
  out.backbone = quantise(c.backbone);
  out.neck = quantise(c.neck);
  out.head = quantise(c.head);
  out.other = quantise(c.other);
  return out;
}

}  // namespace tstream::sim
