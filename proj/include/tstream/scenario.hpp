#pragma once

// Synthetic moving-rectangle videos with exact ground truth.

#include <cstdint>
#include <optional>
#include <vector>

#include "tstream/detmetrics.hpp"
#include "tstream/tensor.hpp"

namespace tstream::sim {

using metrics::BBox;
using metrics::DetectionSet;
using nn::Tensor;

// From `frame` on, the object moves by (vx, vy) pixels per frame.
struct VelocityChange {
  int frame = 0;
  double vx = 0.0;
  double vy = 0.0;

  bool operator==(const VelocityChange&) const = default;
};

struct ObjectSpec {
  int class_id = 0;
  double x = 0.0;  // top-left corner at frame 0
  double y = 0.0;
  double w = 16.0;
  double h = 16.0;
  double vx = 0.0;
  double vy = 0.0;
  int first_frame = 0;  // absent before this frame
  std::vector<VelocityChange> changes;

  bool operator==(const ObjectSpec&) const = default;
};

struct ScenarioSpec {
  int width = 96;
  int height = 96;
  int length = 60;
  double frame_rate = 30.0;
  int num_classes = 2;
  // Random generation (ignored when `objects` is non-empty).
  int num_objects = 3;
  double size_min = 14.0;
  double size_max = 24.0;
  double speed_min = 0.3;  // pixels per frame
  double speed_max = 1.5;
  double accel_prob = 0.0;  // chance that an object gets velocity changes
  int accel_changes = 2;    // at most this many per accelerating object
  double accel_speed_max = 3.0;
  double noise = 0.02;          // per-pixel Gaussian stddev
  double min_visible = 0.25;    // gt drops objects whose visible area fraction is below this
  std::vector<ObjectSpec> objects;

  // Throws ConfigError: sizes must be positive and divisible by 8, objects
  // must fit inside the image, classes must be in range.
  void validate() const;
  bool operator==(const ScenarioSpec&) const = default;
};

class Scenario {
 public:
  Scenario(ScenarioSpec spec, std::vector<ObjectSpec> objects, std::uint64_t seed);

  const ScenarioSpec& spec() const { return spec_; }
  const std::vector<ObjectSpec>& objects() const { return objects_; }
  std::uint64_t seed() const { return seed_; }
  int length() const { return spec_.length; }
  double frame_rate() const { return spec_.frame_rate; }

  // Frames outside [0, length) have no ground truth (empty set); negative
  // frames are a ContractError.
  const DetectionSet& ground_truth(int frame) const;
  // Object index of each ground-truth box, aligned with ground_truth(frame).
  const std::vector<int>& track_ids(int frame) const;

  // Full (unclipped) box of an object at any frame >= 0.
  BBox full_box(std::size_t object, int frame) const;
  // Clipped box if the object counts as visible at that frame.
  std::optional<BBox> visible_box(std::size_t object, int frame) const;

  // Rendered image [3, height, width]; deterministic in (seed, frame).
  Tensor frame(int index) const;

 private:
  ScenarioSpec spec_;
  std::vector<ObjectSpec> objects_;
  std::uint64_t seed_;
  std::vector<DetectionSet> gt_;
  std::vector<std::vector<int>> tracks_;
  DetectionSet empty_;
  std::vector<int> no_tracks_;
};

Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed);

}  // namespace tstream::sim
