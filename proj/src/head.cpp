#include <algorithm>
#include <cmath>
#include <numeric>

#include "tstream/errors.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::model {

namespace {

constexpr double kLogSizeClamp = 4.0;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

Var head_raw(const BoundParams& p, Var features) {
  const auto& s = features.shape();
  if (s.size() != 4) throw ShapeError("head expects [N,H,W,C], got " + nn::to_string(s));
  Var flat = nn::reshape(features, {s[0], s[1] * s[2], s[3]});
  return nn::affine(flat, p("head.weight"), p("head.bias"));
}

std::vector<metrics::BBox> nms(std::vector<metrics::BBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const metrics::BBox& a, const metrics::BBox& b) {
    return a.score.value_or(0.0) > b.score.value_or(0.0);
  });
  std::vector<metrics::BBox> kept;
  for (const auto& b : boxes) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const metrics::BBox& k) {
      return k.class_id == b.class_id && metrics::iou(k, b) > iou_threshold;
    });
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

metrics::DetectionSet decode_head(const Tensor& raw, std::size_t grid_h, std::size_t grid_w,
                                  const DecodeConfig& cfg, int frame_index) {
  if (raw.rank() != 2 || raw.dim(0) != grid_h * grid_w || raw.dim(1) < 6) {
    throw ShapeError("decode_head: raw " + nn::to_string(raw.shape()) + " for grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  const std::size_t width = raw.dim(1), classes = width - 5;
  const double stride = static_cast<double>(cfg.patch);
  std::vector<metrics::BBox> boxes;
  for (std::size_t cell = 0; cell < grid_h * grid_w; ++cell) {
    const double* r = raw.data() + cell * width;
    const double score = sigmoid(r[0]);
    if (score < cfg.score_threshold) continue;
    const double gx = static_cast<double>(cell % grid_w), gy = static_cast<double>(cell / grid_w);
    const double cx = (gx + 0.5 + r[1]) * stride, cy = (gy + 0.5 + r[2]) * stride;
    const double w = std::exp(std::clamp(r[3], -kLogSizeClamp, kLogSizeClamp)) * stride;
    const double h = std::exp(std::clamp(r[4], -kLogSizeClamp, kLogSizeClamp)) * stride;
    metrics::BBox b;
    b.x_min = std::clamp(cx - 0.5 * w, 0.0, cfg.image_w);
    b.x_max = std::clamp(cx + 0.5 * w, 0.0, cfg.image_w);
    b.y_min = std::clamp(cy - 0.5 * h, 0.0, cfg.image_h);
    b.y_max = std::clamp(cy + 0.5 * h, 0.0, cfg.image_h);
    if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) continue;
    b.class_id = static_cast<int>(std::max_element(r + 5, r + 5 + classes) - (r + 5));
    b.score = score;
    boxes.push_back(b);
  }
  return {frame_index, nms(std::move(boxes), cfg.nms_iou)};
}

metrics::DetectionSet toy_head(const ModelParams& params, const FeatureMap& feature, int frame_index) {
  Tape tape(false);
  BoundParams p(tape, params, false);
  const auto& g = feature.grid;
  Var raw = head_raw(p, tape.constant(g.reshaped({1, g.dim(0), g.dim(1), g.dim(2)})));
  const auto& cfg = params.config;
  DecodeConfig dc{cfg.score_threshold, cfg.nms_iou, cfg.patch,
                  static_cast<double>(g.dim(1) * cfg.patch), static_cast<double>(g.dim(0) * cfg.patch)};
  return decode_head(raw.value().reshaped({g.dim(0) * g.dim(1), 5 + cfg.num_classes}), g.dim(0),
                     g.dim(1), dc, frame_index);
}

// ---- training ---------------------------------------------------------------------

TemporalProposal sample_mixed_speed(std::mt19937_64& rng, std::size_t max_past,
                                    std::size_t max_future) {
  const auto past_span = static_cast<std::size_t>(-kMixedPastMin);
  const auto future_span = static_cast<std::size_t>(kMixedFutureMax);
  if (max_past < 1 || max_future < 1) throw ConfigError("max_past and max_future must be >= 1");
  if (max_past > past_span || max_future > future_span) {
    throw ConfigError("max_past/max_future exceed the sampling ranges");
  }
  auto draw = [&rng](std::size_t span, std::size_t limit) {
    const std::size_t count = std::uniform_int_distribution<std::size_t>(1, limit)(rng);
    std::vector<int> pool(span);
    std::iota(pool.begin(), pool.end(), 1);
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, span - 1)(rng);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
  };
  TemporalProposal p;
  p.past = draw(past_span, max_past);
  for (auto& v : p.past) v = -v;
  std::sort(p.past.begin(), p.past.end());
  p.future = draw(future_span, max_future);
  return p;
}

CellTarget encode_target(const metrics::BBox& future_box, double current_cx, double current_cy,
                         std::size_t patch, std::size_t grid_h, std::size_t grid_w) {
  const double stride = static_cast<double>(patch);
  const auto clamp_cell = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
  };
  const std::size_t gx = clamp_cell(current_cx / stride, grid_w);
  const std::size_t gy = clamp_cell(current_cy / stride, grid_h);
  CellTarget t;
  t.cell = gy * grid_w + gx;
  t.dx = future_box.center_x() / stride - (static_cast<double>(gx) + 0.5);
  t.dy = future_box.center_y() / stride - (static_cast<double>(gy) + 0.5);
  t.log_w = std::log(future_box.width() / stride);
  t.log_h = std::log(future_box.height() / stride);
  t.class_id = future_box.class_id;
  return t;
}

Var horizon_loss(Var raw, const std::vector<CellTarget>& targets, std::size_t num_classes,
                 LossTerms* terms) {
  const auto& s = raw.shape();
  const std::size_t width = 5 + num_classes;
  if (s.size() != 2 || s[1] != width) {
    throw ShapeError("horizon_loss: raw " + nn::to_string(s) + " for " +
                     std::to_string(num_classes) + " classes");
  }
  const std::size_t cells = s[0];
  auto& tape = *raw.tape();

  // First target per cell wins.
  std::vector<const CellTarget*> positive;
  std::vector<bool> taken(cells, false);
  for (const auto& t : targets) {
    if (t.cell >= cells) throw ContractError("target cell out of range");
    if (taken[t.cell]) continue;
    taken[t.cell] = true;
    positive.push_back(&t);
  }

  std::vector<std::ptrdiff_t> obj_index(cells);
  Tensor labels({cells}, 0.0);
  for (std::size_t c = 0; c < cells; ++c) {
    obj_index[c] = static_cast<std::ptrdiff_t>(c * width);
    labels[c] = taken[c] ? 1.0 : 0.0;
  }
  Var z = nn::gather(raw, {cells}, std::move(obj_index));
  // BCE with logits, softplus(z) - y z, summed over cells and normalised by
  // the positive count.
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, positive.size()));
  Var obj = nn::scale(nn::sub(nn::sum(nn::softplus(z)), nn::sum(nn::mul(z, tape.constant(labels)))), norm);
  Var total = obj;
  LossTerms local;
  local.objectness = obj.value()[0];

  if (!positive.empty()) {
    const std::size_t n = positive.size();
    std::vector<std::ptrdiff_t> box_index, cls_index, pick;
    Tensor box_target({n, 4});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = *positive[i];
      for (std::size_t k = 0; k < 4; ++k) {
        box_index.push_back(static_cast<std::ptrdiff_t>(t.cell * width + 1 + k));
      }
      box_target[i * 4 + 0] = t.dx;
      box_target[i * 4 + 1] = t.dy;
      box_target[i * 4 + 2] = t.log_w;
      box_target[i * 4 + 3] = t.log_h;
      for (std::size_t k = 0; k < num_classes; ++k) {
        cls_index.push_back(static_cast<std::ptrdiff_t>(t.cell * width + 5 + k));
      }
      if (t.class_id < 0 || static_cast<std::size_t>(t.class_id) >= num_classes) {
        throw ContractError("target class out of range");
      }
      pick.push_back(static_cast<std::ptrdiff_t>(i * num_classes + static_cast<std::size_t>(t.class_id)));
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    Var box = nn::gather(raw, {n, 4}, std::move(box_index));
    Var l1 = nn::scale(nn::sum(nn::abs(nn::sub(box, tape.constant(box_target)))), inv_n);
    Var logp = nn::log_softmax(nn::gather(raw, {n, num_classes}, std::move(cls_index)));
    Var ce = nn::scale(nn::sum(nn::gather(logp, {n}, std::move(pick))), -inv_n);
    total = nn::add(total, nn::add(l1, ce));
    local.box = l1.value()[0];
    local.classification = ce.value()[0];
  }
  local.total = total.value()[0];
  if (terms) *terms = local;
  return total;
}

Var sample_loss(const BoundParams& p, const TrainSample& sample, LossTerms* terms) {
  sample.proposal.validate();
  if (sample.past_images.size() != sample.proposal.past.size() ||
      sample.targets.size() != sample.proposal.future.size()) {
    throw ContractError("train sample " + std::to_string(sample.id) + " inconsistent with proposal");
  }
  auto& tape = p.tape();
  Var current = toy_backbone(p, tape.constant(sample.current_image));
  std::vector<Var> past;
  for (const auto& img : sample.past_images) past.push_back(toy_backbone(p, tape.constant(img)));
  Var raw = head_raw(p, neck_forward(p, current, past, sample.proposal));
  const std::size_t cells = raw.shape()[1], width = raw.shape()[2];
  const std::size_t n = sample.targets.size();
  LossTerms sum_terms;
  Var total;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::ptrdiff_t> index(cells * width);
    std::iota(index.begin(), index.end(), static_cast<std::ptrdiff_t>(j * cells * width));
    LossTerms t;
    Var l = horizon_loss(nn::gather(raw, {cells, width}, std::move(index)), sample.targets[j],
                         p.config().num_classes, &t);
    total = j == 0 ? l : nn::add(total, l);
    sum_terms.objectness += t.objectness / static_cast<double>(n);
    sum_terms.box += t.box / static_cast<double>(n);
    sum_terms.classification += t.classification / static_cast<double>(n);
  }
  total = nn::scale(total, 1.0 / static_cast<double>(n));
  sum_terms.total = total.value()[0];
  if (terms) *terms = sum_terms;
  return total;
}

StepResult train_step(const std::vector<TrainSample>& batch, ModelParams& params,
                      const SgdConfig& sgd) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  if (!(sgd.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  Tape tape;
  BoundParams p(tape, params, true);
  StepResult result;
  std::vector<Var> sample_losses;
  const double share = 1.0 / static_cast<double>(batch.size());
  for (const auto& sample : batch) {
    LossTerms t;
    Var l = sample_loss(p, sample, &t);
    if (!std::isfinite(l.value()[0])) {
      throw NumericError("non-finite loss on training sample " + std::to_string(sample.id) + " (" +
                         to_string(sample.proposal) + ")");
    }
    result.terms.objectness += share * t.objectness;
    result.terms.box += share * t.box;
    result.terms.classification += share * t.classification;
    sample_losses.push_back(l);
  }
  Var loss = sample_losses[0];
  for (std::size_t i = 1; i < sample_losses.size(); ++i) loss = nn::add(loss, sample_losses[i]);
  loss = nn::scale(loss, 1.0 / static_cast<double>(sample_losses.size()));
  tape.backward(loss);

  double scale = 1.0;
  if (sgd.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, var] : p.vars()) {
      for (double g : tape.grad(var).values()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > sgd.grad_clip) scale = sgd.grad_clip / norm;
  }
  for (const auto& [name, var] : p.vars()) {
    const Tensor g = tape.grad(var);
    auto& w = params.tensors.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= sgd.learning_rate * scale * g[i];
  }
  result.loss = loss.value()[0];
  result.terms.total = result.loss;
  return result;
}

}  // namespace tstream::model
