#include "tstream/training.hpp"

#include <algorithm>
#include <random>
#include <string>

#include "tstream/errors.hpp"

namespace tstream::sim {

void TrainConfig::validate(const model::ModelConfig& model) const {
  scenario.validate();
  if (num_scenarios < 1) throw ConfigError("train.num_scenarios must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(sgd.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(sgd.grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0)) throw ConfigError("train.lr_final_fraction must be in [0,1]");
  if (fixed_future < 1) throw ConfigError("train.fixed_future must be >= 1");
  if (static_cast<std::size_t>(scenario.num_classes) > model.num_classes) throw ConfigError("train.scenario.num_classes exceeds model.num_classes");
  if (scenario.width % static_cast<int>(model.patch) != 0 || scenario.height % static_cast<int>(model.patch) != 0) {
    throw ConfigError("train.scenario size must be divisible by model.patch");
  }
  const int reach = -model::kMixedPastMin + (mixed_speed ? model::kMixedFutureMax : fixed_future);
  if (scenario.length <= reach) {
    throw ConfigError("train.scenario.length must exceed " + std::to_string(reach) + " frames");
  }
}

model::TrainSample make_train_sample(const Scenario& scenario, int frame, const model::TemporalProposal& proposal,
                                     std::size_t patch, std::size_t id) {
  proposal.validate();
  if (frame + proposal.past.front() < 0 || frame >= scenario.length()) {
    throw ContractError("training frame " + std::to_string(frame) + " lacks the requested history");
  }
  const auto grid_h = static_cast<std::size_t>(scenario.spec().height) / patch;
  const auto grid_w = static_cast<std::size_t>(scenario.spec().width) / patch;
  model::TrainSample s;
  s.id = id;
  s.proposal = proposal;
  s.current_image = scenario.frame(frame);
  for (int p : proposal.past) s.past_images.push_back(scenario.frame(frame + p));
  const auto& now = scenario.ground_truth(frame);
  const auto& tracks = scenario.track_ids(frame);
  for (int f : proposal.future) {
    std::vector<model::CellTarget> targets;
    for (std::size_t b = 0; b < now.boxes.size(); ++b) {
      const auto future = scenario.visible_box(static_cast<std::size_t>(tracks[b]), frame + f);
      if (!future) continue;
      targets.push_back(model::encode_target(*future, now.boxes[b].center_x(), now.boxes[b].center_y(), patch,
                                             grid_h, grid_w));
    }
    s.targets.push_back(std::move(targets));
  }
  return s;
}

std::vector<Scenario> make_training_pool(const TrainConfig& config) {
  std::vector<Scenario> pool;
  std::mt19937_64 seeds(config.seed ^ 0x7a11u);
  for (std::size_t n = 0; n < config.num_scenarios; ++n) pool.push_back(generate_scenario(config.scenario, seeds()));
  return pool;
}

std::vector<TrainLogEntry> train_model(model::ModelParams& params, const TrainConfig& config,
                                       const std::function<void(const TrainLogEntry&)>& on_step) {
  config.validate(params.config);
  const auto pool = make_training_pool(config);
  std::mt19937_64 rng(config.seed);
  const auto& mc = params.config;
  std::vector<TrainLogEntry> log;
  std::size_t next_id = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<model::TrainSample> batch;
    TrainLogEntry entry;
    entry.step = step;
    for (std::size_t b = 0; b < config.batch; ++b) {
      model::TemporalProposal p = model::sample_mixed_speed(rng, mc.max_past, mc.max_future);
      if (!config.mixed_speed) p.future = {config.fixed_future};
      const Scenario& sc = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      const int lo = -p.past.front();
      const int hi = sc.length() - 1 - p.future.back();
      const int frame = std::uniform_int_distribution<int>(lo, hi)(rng);
      batch.push_back(make_train_sample(sc, frame, p, mc.patch, next_id++));
      entry.proposals.push_back(p);
    }
    model::SgdConfig sgd = config.sgd;
    const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
    sgd.learning_rate *= 1.0 - (1.0 - config.lr_final_fraction) * progress;
    const auto r = model::train_step(batch, params, sgd);
    entry.loss = r.loss;
    entry.terms = r.terms;
    if (on_step) on_step(entry);
    log.push_back(std::move(entry));
  }
  return log;
}

}  // namespace tstream::sim
