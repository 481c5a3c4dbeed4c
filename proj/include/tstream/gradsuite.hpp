#pragma once

// Finite-difference checks of the model's building blocks at 64-bit.

#include <cstdint>
#include <string>
#include <vector>

namespace tstream::model {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;  // worst over every checked input tensor
};

// Softmax cross-entropy, layer norm + MLP, one TAT layer with RTPE and the
// full tiny model (C=8, one layer), on seeded random inputs.
std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed);

}  // namespace tstream::model
