#include "tstream/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "tstream/errors.hpp"

namespace tstream::sim {

namespace {

constexpr double kBackground = 0.1;

struct Style {
  std::array<double, 3> primary;
  std::array<double, 3> secondary;
  int pattern;  // 0 solid, 1 vertical stripes, 2 checker
};

Style class_style(int class_id) {
  static const std::array<std::array<double, 3>, 4> kPrimary = {
      {{0.95, 0.35, 0.25}, {0.20, 0.85, 0.90}, {0.90, 0.90, 0.30}, {0.60, 0.30, 0.90}}};
  const auto& p = kPrimary[static_cast<std::size_t>(class_id) % kPrimary.size()];
  Style s{p, {p[0] * 0.4, p[1] * 0.4, p[2] * 0.4}, class_id % 3};
  return s;
}

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

std::string object_path(std::size_t i) { return "scenario.objects[" + std::to_string(i) + "]"; }

}  // namespace

void ScenarioSpec::validate() const {
  if (width <= 0 || height <= 0 || width % 8 != 0 || height % 8 != 0) {
    throw ConfigError("scenario.width/height must be positive multiples of 8");
  }
  if (length < 1) throw ConfigError("scenario.length must be >= 1");
  if (!(frame_rate > 0.0)) throw ConfigError("scenario.frame_rate must be > 0");
  if (num_classes < 1) throw ConfigError("scenario.num_classes must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("scenario.noise must be >= 0");
  if (!(min_visible > 0.0 && min_visible <= 1.0)) throw ConfigError("scenario.min_visible must be in (0,1]");
  if (objects.empty()) {
    if (num_objects < 0) throw ConfigError("scenario.num_objects must be >= 0");
    if (!(size_min > 0.0 && size_min <= size_max)) throw ConfigError("scenario.size_min/size_max invalid");
    if (size_max > std::min(width, height)) throw ConfigError("scenario.size_max exceeds the image");
    if (!(speed_min >= 0.0 && speed_min <= speed_max)) throw ConfigError("scenario.speed_min/speed_max invalid");
    if (!(accel_prob >= 0.0 && accel_prob <= 1.0)) throw ConfigError("scenario.accel_prob must be in [0,1]");
    if (accel_changes < 1) throw ConfigError("scenario.accel_changes must be >= 1");
    if (!(accel_speed_max >= 0.0)) throw ConfigError("scenario.accel_speed_max must be >= 0");
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    if (!(o.w > 0.0 && o.h > 0.0)) throw ConfigError(object_path(i) + ": size must be positive");
    if (o.w > width || o.h > height) throw ConfigError(object_path(i) + ": object larger than image");
    if (o.class_id < 0 || o.class_id >= num_classes) throw ConfigError(object_path(i) + ".class out of range");
    if (o.first_frame < 0) throw ConfigError(object_path(i) + ".first_frame must be >= 0");
    for (std::size_t c = 1; c < o.changes.size(); ++c) {
      if (o.changes[c].frame <= o.changes[c - 1].frame) {
        throw ConfigError(object_path(i) + ".changes must have increasing frames");
      }
    }
  }
}

Scenario::Scenario(ScenarioSpec spec, std::vector<ObjectSpec> objects, std::uint64_t seed)
    : spec_(std::move(spec)), objects_(std::move(objects)), seed_(seed) {
  gt_.resize(static_cast<std::size_t>(spec_.length));
  tracks_.resize(gt_.size());
  for (int f = 0; f < spec_.length; ++f) {
    gt_[static_cast<std::size_t>(f)].frame_index = f;
    for (std::size_t o = 0; o < objects_.size(); ++o) {
      if (auto box = visible_box(o, f)) {
        gt_[static_cast<std::size_t>(f)].boxes.push_back(*box);
        tracks_[static_cast<std::size_t>(f)].push_back(static_cast<int>(o));
      }
    }
  }
}

const DetectionSet& Scenario::ground_truth(int frame) const {
  if (frame < 0) throw ContractError("negative frame index " + std::to_string(frame));
  if (frame >= spec_.length) return empty_;
  return gt_[static_cast<std::size_t>(frame)];
}

const std::vector<int>& Scenario::track_ids(int frame) const {
  if (frame < 0) throw ContractError("negative frame index " + std::to_string(frame));
  if (frame >= spec_.length) return no_tracks_;
  return tracks_[static_cast<std::size_t>(frame)];
}

BBox Scenario::full_box(std::size_t object, int frame) const {
  const ObjectSpec& o = objects_.at(object);
  if (frame < 0) throw ContractError("negative frame index " + std::to_string(frame));
  double x = o.x, y = o.y, vx = o.vx, vy = o.vy;
  int at = 0;
  for (const auto& c : o.changes) {
    if (c.frame >= frame) break;
    const int steps = std::max(0, c.frame - at);
    x += vx * steps;
    y += vy * steps;
    at = std::max(at, c.frame);
    vx = c.vx;
    vy = c.vy;
  }
  x += vx * (frame - at);
  y += vy * (frame - at);
  BBox b{x, y, x + o.w, y + o.h, o.class_id, std::nullopt};
  return b;
}

std::optional<BBox> Scenario::visible_box(std::size_t object, int frame) const {
  if (frame < objects_.at(object).first_frame) return std::nullopt;
  BBox b = full_box(object, frame);
  const double full = b.area();
  b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(spec_.width));
  b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(spec_.width));
  b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(spec_.height));
  b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(spec_.height));
  if (b.x_max <= b.x_min || b.y_max <= b.y_min) return std::nullopt;
  if (b.area() < spec_.min_visible * full) return std::nullopt;
  return b;
}

Tensor Scenario::frame(int index) const {
  if (index < 0 || index >= spec_.length) {
    throw ContractError("frame " + std::to_string(index) + " outside scenario of length " +
                        std::to_string(spec_.length));
  }
  const auto H = static_cast<std::size_t>(spec_.height);
  const auto W = static_cast<std::size_t>(spec_.width);
  Tensor img({3, H, W}, kBackground);
  double* px = img.data();
  for (std::size_t o = 0; o < objects_.size(); ++o) {
    if (index < objects_[o].first_frame) continue;
    const BBox b = full_box(o, index);
    const Style style = class_style(b.class_id);
    const auto r0 = static_cast<std::size_t>(std::clamp(std::floor(b.y_min), 0.0, static_cast<double>(H)));
    const auto r1 = static_cast<std::size_t>(std::clamp(std::ceil(b.y_max), 0.0, static_cast<double>(H)));
    const auto c0 = static_cast<std::size_t>(std::clamp(std::floor(b.x_min), 0.0, static_cast<double>(W)));
    const auto c1 = static_cast<std::size_t>(std::clamp(std::ceil(b.x_max), 0.0, static_cast<double>(W)));
    for (std::size_t r = r0; r < r1; ++r) {
      const double cy = overlap(b.y_min, b.y_max, static_cast<double>(r), static_cast<double>(r) + 1.0);
      for (std::size_t c = c0; c < c1; ++c) {
        const double cov = cy * overlap(b.x_min, b.x_max, static_cast<double>(c), static_cast<double>(c) + 1.0);
        if (cov <= 0.0) continue;
        const auto lx = static_cast<long>(std::floor((static_cast<double>(c) + 0.5 - b.x_min) / 3.0));
        const auto ly = static_cast<long>(std::floor((static_cast<double>(r) + 0.5 - b.y_min) / 3.0));
        bool alt = false;
        if (style.pattern == 1) alt = (lx & 1) != 0;
        if (style.pattern == 2) alt = ((lx + ly) & 1) != 0;
        const auto& color = alt ? style.secondary : style.primary;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double& v = px[(ch * H + r) * W + c];
          v = (1.0 - cov) * v + cov * color[ch];
        }
      }
    }
  }
  if (spec_.noise > 0.0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(index), 0x5ce4e5u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> n(0.0, spec_.noise);
    for (double& v : img.values()) v += n(rng);
  }
  return img;
}

Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (!spec.objects.empty()) return Scenario(spec, spec.objects, seed);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::vector<ObjectSpec> objects;
  for (int i = 0; i < spec.num_objects; ++i) {
    ObjectSpec o;
    o.class_id = static_cast<int>(std::floor(unit(rng) * spec.num_classes));
    o.class_id = std::min(o.class_id, spec.num_classes - 1);
    o.w = uniform(spec.size_min, spec.size_max);
    o.h = uniform(spec.size_min, spec.size_max);
    o.x = uniform(0.0, spec.width - o.w);
    o.y = uniform(0.0, spec.height - o.h);
    const double speed = uniform(spec.speed_min, spec.speed_max);
    const double angle = uniform(0.0, 2.0 * std::numbers::pi);
    o.vx = speed * std::cos(angle);
    o.vy = speed * std::sin(angle);
    if (spec.length > 2 && unit(rng) < spec.accel_prob) {
      const int count = 1 + static_cast<int>(std::floor(unit(rng) * spec.accel_changes));
      std::vector<int> frames;
      for (int c = 0; c < std::min(count, spec.accel_changes); ++c) {
        frames.push_back(1 + static_cast<int>(std::floor(unit(rng) * (spec.length - 1))));
      }
      std::sort(frames.begin(), frames.end());
      frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
      for (int f : frames) {
        const double s = uniform(0.0, spec.accel_speed_max);
        const double a = uniform(0.0, 2.0 * std::numbers::pi);
        o.changes.push_back({f, s * std::cos(a), s * std::sin(a)});
      }
    }
    objects.push_back(std::move(o));
  }
  return Scenario(spec, std::move(objects), seed);
}

}  // namespace tstream::sim
