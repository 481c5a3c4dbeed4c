#pragma once

// Toy-scale multi-horizon detector:
//   head(neck(concat(backbone(I_0), {F_i}), rtpe))
// The neck is a stack of windowed cross-attention layers whose queries are
// the current features replicated once per requested future index.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tstream/autodiff.hpp"
#include "tstream/detmetrics.hpp"

namespace tstream::model {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Features of one frame, channels-last [H', W', C].
struct FeatureMap {
  int source_index = 0;  // relative frame index: 0 current, < 0 past
  Tensor grid;

  bool operator==(const FeatureMap&) const = default;
};

struct TemporalProposal {
  std::vector<int> past;    // ascending, all < 0
  std::vector<int> future;  // ascending, all > 0

  // Throws ContractError unless both sides are non-empty, sorted, unique and
  // correctly signed.
  void validate() const;
  bool operator==(const TemporalProposal&) const = default;
};

std::string to_string(const TemporalProposal& p);

struct WindowConfig {
  std::size_t win_t = 4;
  std::size_t win_h = 3;
  std::size_t win_w = 3;

  bool operator==(const WindowConfig&) const = default;
};

// Attention values per key slot i: F_0 - F_i, F_i - F_0, or F_i itself.
enum class ValueMode { kPresentMinusPast, kPastMinusPresent, kKeyFeatures };

struct ModelConfig {
  std::size_t channels = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  WindowConfig window;
  std::size_t patch = 8;
  std::size_t num_classes = 2;
  std::size_t mlp_hidden = 64;
  std::size_t rtpe_hidden = 16;
  std::size_t max_past = 4;
  std::size_t max_future = 4;
  bool use_rtpe = true;
  bool use_tat = true;
  ValueMode values = ValueMode::kPresentMinusPast;
  double ln_eps = 1e-5;
  double score_threshold = 0.3;
  double nms_iou = 0.65;

  // Throws ConfigError on inconsistent values.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

struct ModelParams {
  ModelConfig config;
  ParamMap tensors;

  const Tensor& at(const std::string& name) const;
};

// Truncated normal projections (sigma 1/sqrt(fan_in)), zero biases, unit LN gains and a
// zero final RTPE layer.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Parameters placed on a tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params, bool requires_grad);

  Var operator()(const std::string& name) const;
  const ModelConfig& config() const { return config_; }
  const std::map<std::string, Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }
  // Replaces one bound parameter, e.g. with a gradient-checked input.
  void set(const std::string& name, Var v);

 private:
  Tape* tape_;
  ModelConfig config_;
  std::map<std::string, Var> vars_;
};

// ---- backbone ---------------------------------------------------------------

// Image [3, H, W] -> features [H/p, W/p, C] by non-overlapping patch gather and
// one affine map. Throws ShapeError if H or W is not a multiple of the patch.
Var toy_backbone(const BoundParams& p, Var image);
FeatureMap compute_features(const ModelParams& params, const Tensor& image, int source_index = 0);

// ---- windows ------------------------------------------------------------------

struct WindowPartition {
  Var tokens;               // [nWin, win_t*win_h*win_w, C]
  std::vector<bool> valid;  // per token; false on zero padding
  std::size_t windows_t = 0, windows_h = 0, windows_w = 0;
};

// x: [T, H, W, C]. Zero-pads every axis up to a window multiple.
WindowPartition window_partition(Var x, const WindowConfig& cfg);
// Inverse of window_partition on the unpadded region. Throws ShapeError if
// `tokens` does not have the partition shape of `original` under `cfg`.
Var window_reverse(Var tokens, const WindowConfig& cfg, const Shape& original);

// ---- relative temporal positional embedding ----------------------------------

struct RTPETable {
  int t_max = 0;
  std::size_t win_h = 0, win_w = 0, heads = 0;
  Var table;  // [heads, t_max + 1, 2*win_h - 1, 2*win_w - 1]

  // Flat index into `table` for one head, or -1 when dt < 0.
  std::ptrdiff_t index(std::size_t head, int dt, int dh, int dw) const;
  // Throws ConfigError when dt > t_max.
  double lookup(std::size_t head, int dt, int dh, int dw) const;
};

// Temporal range of a proposal: max(future) - min(past).
int rtpe_t_max(const TemporalProposal& proposal);

// Evaluates layer `layer`'s projector on every (dt, dh, dw) cell.
RTPETable build_rtpe(const BoundParams& p, std::size_t layer, int t_max);
// Projector output for a single coordinate, bypassing the table.
std::vector<double> rtpe_direct(const ModelParams& params, std::size_t layer, int dt, int dh, int dw);

// ---- temporal adaptive transformer ------------------------------------------------

struct AttentionProbe {
  Tensor weights;  // [nWin, heads, Nq, Nk] softmax output of the last call
  std::vector<int> query_time, key_time;  // per token within a window
};

// One pre-norm cross-attention layer.
//   queries: [Tq, H, W, C] at query_times; keys/values: [Tk, H, W, C] at
//   key_times (chronological). Only the latest win_t + 1 key slots are used.
// Attention logits are QK^T / sqrt(d) + RTPE bias, with -inf where the key lies
// after the query or on padding.
Var tat_layer(const BoundParams& p, std::size_t layer, Var queries, Var keys, Var values,
              const std::vector<int>& query_times, const std::vector<int>& key_times,
              const std::optional<RTPETable>& rtpe, AttentionProbe* probe = nullptr);

// ---- head -------------------------------------------------------------------

// Raw per-cell predictions [N, H'*W', 5 + classes] for features [N, H', W', C]:
// objectness logit, dx, dy, log-w, log-h (cell units), class logits.
Var head_raw(const BoundParams& p, Var features);

struct DecodeConfig {
  double score_threshold = 0.3;
  double nms_iou = 0.65;
  std::size_t patch = 8;
  double image_w = 0.0, image_h = 0.0;
};

// Decodes one [H'*W', 5 + classes] slice into thresholded, NMS-filtered boxes.
metrics::DetectionSet decode_head(const Tensor& raw, std::size_t grid_h, std::size_t grid_w,
                                  const DecodeConfig& cfg, int frame_index);
// Per-class greedy suppression of boxes overlapping a higher-scored box by
// more than `iou_threshold`. Output is score-sorted.
std::vector<metrics::BBox> nms(std::vector<metrics::BBox> boxes, double iou_threshold);

metrics::DetectionSet toy_head(const ModelParams& params, const FeatureMap& feature, int frame_index);

// ---- full model -----------------------------------------------------------------

// Future features [|future|, H', W', C].
// `buffered` must carry exactly the proposal's past indices, chronologically.
Var neck_forward(const BoundParams& p, Var current, const std::vector<FeatureMap>& buffered,
                 const TemporalProposal& proposal);
// Past features as tape values, aligned with proposal.past.
Var neck_forward(const BoundParams& p, Var current, const std::vector<Var>& past,
                 const TemporalProposal& proposal);

// One DetectionSet per future index, tagged with that index.
std::vector<metrics::DetectionSet> transtreamer_forward(const ModelParams& params,
                                                        const Tensor& current_image,
                                                        const std::vector<FeatureMap>& buffered,
                                                        const TemporalProposal& proposal);
// Same, starting from already computed current features.
std::vector<metrics::DetectionSet> transtreamer_forward(const ModelParams& params,
                                                        const FeatureMap& current,
                                                        const std::vector<FeatureMap>& buffered,
                                                        const TemporalProposal& proposal);

// ---- training -------------------------------------------------------------------

// |past| uniform in [1, max_past], then a uniform subset of [-24, -1]; the same
// for future over [1, 16].
TemporalProposal sample_mixed_speed(std::mt19937_64& rng, std::size_t max_past,
                                    std::size_t max_future);

inline constexpr int kMixedPastMin = -24;
inline constexpr int kMixedFutureMax = 16;

// Box target for one horizon, assigned to the cell holding the object's
// current-frame center.
struct CellTarget {
  std::size_t cell = 0;  // row-major index into the H' x W' grid
  double dx = 0.0, dy = 0.0, log_w = 0.0, log_h = 0.0;
  int class_id = 0;
};

struct TrainSample {
  Tensor current_image;                  // [3, H, W]
  std::vector<Tensor> past_images;       // aligned with proposal.past
  TemporalProposal proposal;
  std::vector<std::vector<CellTarget>> targets;  // aligned with proposal.future
  std::size_t id = 0;
};

// Encodes a box against a grid cell.
CellTarget encode_target(const metrics::BBox& future_box, double current_cx, double current_cy,
                         std::size_t patch, std::size_t grid_h, std::size_t grid_w);

struct LossTerms {
  double objectness = 0.0;
  double box = 0.0;
  double classification = 0.0;
  double total = 0.0;
};

// Loss of one horizon given raw predictions [H'*W', 5 + classes]:
// objectness BCE summed over cells and divided by the positive count, plus
// positive-cell box L1 and positive-cell class CE.
Var horizon_loss(Var raw, const std::vector<CellTarget>& targets, std::size_t num_classes,
                 LossTerms* terms = nullptr);

// Equal-weight mean of the horizon losses of one sample.
Var sample_loss(const BoundParams& p, const TrainSample& sample, LossTerms* terms = nullptr);

struct SgdConfig {
  double learning_rate = 0.01;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

struct StepResult {
  double loss = 0.0;
  LossTerms terms;
};

// Equal-weight mean of horizon losses over the batch, then one SGD update.
// Throws NumericError naming the sample id on a non-finite loss.
StepResult train_step(const std::vector<TrainSample>& batch, ModelParams& params,
                      const SgdConfig& sgd);

// ---- checkpoints ------------------------------------------------------------------

std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(const std::string& text);
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace tstream::model
