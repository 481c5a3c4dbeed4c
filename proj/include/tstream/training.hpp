#pragma once

// Training samples drawn from synthetic scenarios, and the training loop.

#include <cstdint>
#include <functional>
#include <vector>

#include "tstream/scenario.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::sim {

struct TrainConfig {
  ScenarioSpec scenario;  // template; each pool member gets its own seed
  std::size_t num_scenarios = 16;
  std::size_t steps = 300;
  std::size_t batch = 4;
  model::SgdConfig sgd;
  // Learning rate decays linearly from sgd.learning_rate to this fraction of
  // it over the run.
  double lr_final_fraction = 1.0;
  bool mixed_speed = true;  // false: future fixed to {fixed_future}
  int fixed_future = 1;
  std::uint64_t seed = 1;

  // Throws ConfigError (scenarios must be long enough for the deepest
  // past and furthest future together).
  void validate(const model::ModelConfig& model) const;
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  model::LossTerms terms;
  std::vector<model::TemporalProposal> proposals;  // one per batch sample
};

// Targets pair each object visible at `frame` with its box at frame + f.
model::TrainSample make_train_sample(const Scenario& scenario, int frame, const model::TemporalProposal& proposal,
                                     std::size_t patch, std::size_t id);

std::vector<Scenario> make_training_pool(const TrainConfig& config);

// Runs config.steps SGD steps; deterministic in config.seed.
std::vector<TrainLogEntry> train_model(model::ModelParams& params, const TrainConfig& config,
                                       const std::function<void(const TrainLogEntry&)>& on_step = {});

}  // namespace tstream::sim
