#include "tstream/gradsuite.hpp"

#include <algorithm>
#include <random>

#include "tstream/transtreamer.hpp"

namespace tstream::model {

namespace {

// Moves parameters away from their structured init so the checks are not
// dominated by zeros.
void perturb(ModelParams& p, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.tensors) {
    if (name.find("gain") != std::string::npos) continue;
    const auto noise = nn::truncated_normal(t.shape(), stddev, rng);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += noise[i];
  }
}

// Random projection of an output to a scalar.
Var project(Tape& t, Var out, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  return nn::sum(nn::mul(out, t.constant(nn::uniform(out.shape(), -1, 1, r))));
}

double softmax_ce(std::mt19937_64& rng) {
  const Tensor logits = nn::uniform({4, 5}, -2, 2, rng);
  Tensor onehot({4, 5}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) onehot.at({i, (3 * i + 1) % 5}) = 1.0;
  return nn::grad_check(
      [&](Tape& t, Var x) { return nn::scale(nn::sum(nn::mul(nn::log_softmax(x), t.constant(onehot))), -0.25); },
      logits);
}

double layer_norm_mlp(std::mt19937_64& rng) {
  Tensor x = nn::uniform({3, 6}, -1, 1, rng);
  Tensor gain = nn::uniform({6}, 0.5, 1.5, rng), bias = nn::uniform({6}, -0.5, 0.5, rng);
  Tensor w1 = nn::uniform({6, 10}, -0.5, 0.5, rng), b1 = nn::uniform({10}, -0.2, 0.2, rng);
  Tensor w2 = nn::uniform({10, 6}, -0.5, 0.5, rng), b2 = nn::uniform({6}, -0.2, 0.2, rng);
  enum Slot { kX, kGain, kW1, kW2 };
  auto block = [&](Slot slot) {
    return [&, slot](Tape& t, Var v) {
      auto pick = [&](Slot s, const Tensor& value) { return s == slot ? v : t.constant(value); };
      Var h = nn::layer_norm(pick(kX, x), pick(kGain, gain), t.constant(bias));
      h = nn::gelu(nn::affine(h, pick(kW1, w1), t.constant(b1)));
      h = nn::affine(h, pick(kW2, w2), t.constant(b2));
      return project(t, h, 5);
    };
  };
  return std::max({nn::grad_check(block(kX), x), nn::grad_check(block(kGain), gain),
                   nn::grad_check(block(kW1), w1), nn::grad_check(block(kW2), w2)});
}

double tat_with_rtpe(std::mt19937_64& rng, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.mlp_hidden = 16;
  cfg.rtpe_hidden = 8;
  auto params = init_params(cfg, seed);
  perturb(params, seed + 1, 0.3);
  const Tensor queries = nn::uniform({2, 3, 4, 8}, -1, 1, rng);
  const Tensor keys = nn::uniform({3, 3, 4, 8}, -1, 1, rng);
  const Tensor values = nn::uniform({3, 3, 4, 8}, -1, 1, rng);
  const std::vector<int> qt{1, 3}, kt{-2, -1, 0};
  enum Slot { kQ, kK, kV, kParam };
  auto layer = [&](Slot slot, const std::string& param = {}) {
    return [&, slot, param](Tape& t, Var v) {
      BoundParams p(t, params, false);
      if (slot == kParam) p.set(param, v);
      auto pick = [&](Slot s, const Tensor& value) { return s == slot ? v : t.constant(value); };
      return project(t, tat_layer(p, 0, pick(kQ, queries), pick(kK, keys), pick(kV, values), qt, kt,
                                  build_rtpe(p, 0, 5)),
                     7);
    };
  };
  double worst = std::max({nn::grad_check(layer(kQ), queries), nn::grad_check(layer(kK), keys),
                           nn::grad_check(layer(kV), values)});
  for (const auto& [name, value] : params.tensors) {
    if (name.rfind("tat.0.", 0) != 0) continue;
    worst = std::max(worst, nn::grad_check(layer(kParam, name), value));
  }
  return worst;
}

double tiny_model(std::mt19937_64& rng, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.mlp_hidden = 8;
  cfg.rtpe_hidden = 4;
  auto params = init_params(cfg, seed);
  perturb(params, seed + 1, 0.2);
  TrainSample s;
  s.proposal = {{-3, -1}, {1, 4}};
  s.current_image = nn::uniform({3, 32, 32}, 0, 1, rng);
  for (int i = 0; i < 2; ++i) s.past_images.push_back(nn::uniform({3, 32, 32}, 0, 1, rng));
  for (int j = 0; j < 2; ++j) {
    const double shift = 3.0 * j;
    s.targets.push_back({encode_target({4.0 + shift, 5.0, 17.0 + shift, 20.0, j, std::nullopt}, 10.0, 12.0, 8, 4, 4),
                         encode_target({18.0, 16.0, 30.0, 27.0, 1, std::nullopt}, 24.0, 20.0, 8, 4, 4)});
  }
  double worst = 0.0;
  for (const auto& [name, value] : params.tensors) {
    auto f = [&, n = name](Tape& t, Var x) {
      BoundParams p(t, params, false);
      p.set(n, x);
      return sample_loss(p, s);
    };
    worst = std::max(worst, nn::grad_check(f, value));
  }
  return worst;
}

}  // namespace

std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> out;
  out.push_back({"softmax_cross_entropy", softmax_ce(rng)});
  out.push_back({"layer_norm_mlp", layer_norm_mlp(rng)});
  out.push_back({"tat_layer_rtpe", tat_with_rtpe(rng, seed + 10)});
  out.push_back({"transtreamer_tiny", tiny_model(rng, seed + 20)});
  return out;
}

}  // namespace tstream::model
