#include "tstream/transtreamer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "tstream/errors.hpp"

namespace tstream::model {

using nn::Shape;

namespace {

std::string layer_name(std::size_t layer, const std::string& leaf) {
  return "tat." + std::to_string(layer) + "." + leaf;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void require_rank4(const Var& v, const char* what) {
  if (v.shape().size() != 4) {
    throw ShapeError(std::string(what) + " must be [T,H,W,C], got " + nn::to_string(v.shape()));
  }
}

// Copies along a new leading axis: [H,W,C] -> [n,H,W,C].
Var replicate(Var x, std::size_t n) {
  const std::size_t len = x.value().size();
  Shape shape{n};
  for (auto d : x.shape()) shape.push_back(d);
  std::vector<std::ptrdiff_t> index(n * len);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<std::ptrdiff_t>(i % len);
  return nn::gather(x, std::move(shape), std::move(index));
}

// Rows [first, first + count) of the leading axis.
Var slice_leading(Var x, std::size_t first, std::size_t count) {
  Shape shape = x.shape();
  const std::size_t row = x.value().size() / shape[0];
  shape[0] = count;
  std::vector<std::ptrdiff_t> index(count * row);
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = static_cast<std::ptrdiff_t>(first * row + i);
  }
  return nn::gather(x, std::move(shape), std::move(index));
}

}  // namespace

// ---- proposal / config --------------------------------------------------------

void TemporalProposal::validate() const {
  if (past.empty()) throw ContractError("temporal proposal: past is empty");
  if (future.empty()) throw ContractError("temporal proposal: future is empty");
  for (std::size_t i = 0; i < past.size(); ++i) {
    if (past[i] >= 0) throw ContractError("temporal proposal: past index must be < 0");
    if (i > 0 && past[i] <= past[i - 1]) {
      throw ContractError("temporal proposal: past must be strictly ascending");
    }
  }
  for (std::size_t i = 0; i < future.size(); ++i) {
    if (future[i] <= 0) throw ContractError("temporal proposal: future index must be > 0");
    if (i > 0 && future[i] <= future[i - 1]) {
      throw ContractError("temporal proposal: future must be strictly ascending");
    }
  }
}

std::string to_string(const TemporalProposal& p) {
  std::ostringstream os;
  auto list = [&os](const std::vector<int>& v) {
    os << '{';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '}';
  };
  os << "past=";
  list(p.past);
  os << " future=";
  list(p.future);
  return os.str();
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(std::string("model.") + key + " must be >= 1");
  };
  positive(channels, "channels");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(window.win_t, "window.t");
  positive(window.win_h, "window.h");
  positive(window.win_w, "window.w");
  positive(patch, "patch");
  positive(num_classes, "num_classes");
  positive(mlp_hidden, "mlp_hidden");
  positive(rtpe_hidden, "rtpe_hidden");
  positive(max_past, "max_past");
  positive(max_future, "max_future");
  if (channels % heads != 0) throw ConfigError("model.channels must be divisible by model.heads");
  if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be > 0");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) {
    throw ConfigError("model.score_threshold must be in [0,1]");
  }
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ConfigError("model.nms_iou must be in (0,1]");
}

const Tensor& ModelParams::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("model parameter missing: " + name);
  return it->second;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.config = config;
  const std::size_t c = config.channels;
  // Fan-in scaled: stddev 1/sqrt(rows) for a [rows, cols] weight.
  auto normal = [&](Shape s) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(s.at(0)));
    return nn::truncated_normal(std::move(s), stddev, rng);
  };
  auto zeros = [](Shape s) { return Tensor(std::move(s), 0.0); };

  p.tensors["backbone.weight"] = normal({3 * config.patch * config.patch, c});
  p.tensors["backbone.bias"] = zeros({c});
  if (config.use_tat) {
    for (std::size_t l = 0; l < config.layers; ++l) {
      auto name = [l](const char* leaf) { return layer_name(l, leaf); };
      p.tensors[name("ln1.gain")] = Tensor({c}, 1.0);
      p.tensors[name("ln1.bias")] = zeros({c});
      p.tensors[name("q.weight")] = normal({c, c});
      p.tensors[name("q.bias")] = zeros({c});
      p.tensors[name("k.weight")] = normal({c, c});
      p.tensors[name("k.bias")] = zeros({c});
      p.tensors[name("v.weight")] = normal({c, c});
      p.tensors[name("o.weight")] = normal({c, c});
      p.tensors[name("ln2.gain")] = Tensor({c}, 1.0);
      p.tensors[name("ln2.bias")] = zeros({c});
      p.tensors[name("mlp.fc1.weight")] = normal({c, config.mlp_hidden});
      p.tensors[name("mlp.fc1.bias")] = zeros({config.mlp_hidden});
      p.tensors[name("mlp.fc2.weight")] = normal({config.mlp_hidden, c});
      p.tensors[name("mlp.fc2.bias")] = zeros({c});
      if (config.use_rtpe) {
        p.tensors[name("rtpe.fc1.weight")] = normal({3, config.rtpe_hidden});
        p.tensors[name("rtpe.fc1.bias")] = zeros({config.rtpe_hidden});
        p.tensors[name("rtpe.fc2.weight")] = zeros({config.rtpe_hidden, config.heads});
        p.tensors[name("rtpe.fc2.bias")] = zeros({config.heads});
      }
    }
  } else {
    p.tensors["shortcut.weight"] = normal({c, c});
    p.tensors["shortcut.bias"] = zeros({c});
  }
  const std::size_t out = 5 + config.num_classes;
  p.tensors["head.weight"] = normal({c, out});
  Tensor head_bias({out}, 0.0);
  head_bias[0] = -4.0;  // objectness prior ~ 0.018
  p.tensors["head.bias"] = head_bias;
  return p;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool requires_grad)
    : tape_(&tape), config_(params.config) {
  for (const auto& [name, value] : params.tensors) vars_[name] = tape.leaf(value, requires_grad);
}

void BoundParams::set(const std::string& name, Var v) {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("model parameter missing: " + name);
  if (it->second.shape() != v.shape()) {
    throw ShapeError("parameter " + name + " is " + nn::to_string(it->second.shape()) + ", got " +
                     nn::to_string(v.shape()));
  }
  it->second = v;
}

Var BoundParams::operator()(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("model parameter missing: " + name);
  return it->second;
}

// ---- backbone ----------------------------------------------------------------

Var toy_backbone(const BoundParams& p, Var image) {
  const auto& s = image.shape();
  const std::size_t patch = p.config().patch;
  if (s.size() != 3 || s[0] != 3) {
    throw ShapeError("backbone expects an image [3,H,W], got " + nn::to_string(s));
  }
  const std::size_t h = s[1], w = s[2];
  if (h % patch != 0 || w % patch != 0) {
    throw ShapeError("image " + nn::to_string(s) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, plen = 3 * patch * patch;
  std::vector<std::ptrdiff_t> index;
  index.reserve(gh * gw * plen);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) {
            index.push_back(
                static_cast<std::ptrdiff_t>((c * h + gy * patch + py) * w + gx * patch + px));
          }
  Var patches = nn::gather(image, {gh * gw, plen}, std::move(index));
  Var feats = nn::affine(patches, p("backbone.weight"), p("backbone.bias"));
  return nn::reshape(feats, {gh, gw, p.config().channels});
}

FeatureMap compute_features(const ModelParams& params, const Tensor& image, int source_index) {
  Tape tape(false);
  BoundParams p(tape, params, false);
  return {source_index, toy_backbone(p, tape.constant(image)).value()};
}

// ---- windows ----------------------------------------------------------------------

WindowPartition window_partition(Var x, const WindowConfig& cfg) {
  require_rank4(x, "window_partition input");
  if (cfg.win_t == 0 || cfg.win_h == 0 || cfg.win_w == 0) {
    throw ConfigError("window extents must be >= 1");
  }
  const auto& s = x.shape();
  const std::size_t T = s[0], H = s[1], W = s[2], C = s[3];
  WindowPartition out;
  out.windows_t = ceil_div(T, cfg.win_t);
  out.windows_h = ceil_div(H, cfg.win_h);
  out.windows_w = ceil_div(W, cfg.win_w);
  const std::size_t n_win = out.windows_t * out.windows_h * out.windows_w;
  const std::size_t n_tok = cfg.win_t * cfg.win_h * cfg.win_w;
  std::vector<std::ptrdiff_t> index(n_win * n_tok * C, -1);
  out.valid.assign(n_win * n_tok, false);
  std::size_t win = 0;
  for (std::size_t bt = 0; bt < out.windows_t; ++bt)
    for (std::size_t bh = 0; bh < out.windows_h; ++bh)
      for (std::size_t bw = 0; bw < out.windows_w; ++bw, ++win) {
        std::size_t tok = 0;
        for (std::size_t a = 0; a < cfg.win_t; ++a)
          for (std::size_t b = 0; b < cfg.win_h; ++b)
            for (std::size_t c = 0; c < cfg.win_w; ++c, ++tok) {
              const std::size_t t = bt * cfg.win_t + a, h = bh * cfg.win_h + b,
                                w = bw * cfg.win_w + c;
              if (t >= T || h >= H || w >= W) continue;
              const std::size_t slot = win * n_tok + tok;
              out.valid[slot] = true;
              const std::size_t src = ((t * H + h) * W + w) * C;
              for (std::size_t ch = 0; ch < C; ++ch) {
                index[slot * C + ch] = static_cast<std::ptrdiff_t>(src + ch);
              }
            }
      }
  out.tokens = nn::gather(x, {n_win, n_tok, C}, std::move(index));
  return out;
}

Var window_reverse(Var tokens, const WindowConfig& cfg, const Shape& original) {
  if (original.size() != 4) {
    throw ShapeError("window_reverse target must be [T,H,W,C], got " + nn::to_string(original));
  }
  const std::size_t T = original[0], H = original[1], W = original[2], C = original[3];
  const std::size_t nt = ceil_div(T, cfg.win_t), nh = ceil_div(H, cfg.win_h),
                    nw = ceil_div(W, cfg.win_w);
  const std::size_t n_tok = cfg.win_t * cfg.win_h * cfg.win_w;
  const Shape expected{nt * nh * nw, n_tok, C};
  if (tokens.shape() != expected) {
    throw ShapeError("window_reverse: tokens " + nn::to_string(tokens.shape()) +
                     " do not match partition shape " + nn::to_string(expected) + " of " +
                     nn::to_string(original));
  }
  std::vector<std::ptrdiff_t> index(T * H * W * C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t win = ((t / cfg.win_t) * nh + h / cfg.win_h) * nw + w / cfg.win_w;
        const std::size_t tok =
            ((t % cfg.win_t) * cfg.win_h + h % cfg.win_h) * cfg.win_w + w % cfg.win_w;
        const std::size_t dst = ((t * H + h) * W + w) * C;
        for (std::size_t ch = 0; ch < C; ++ch) {
          index[dst + ch] = static_cast<std::ptrdiff_t>((win * n_tok + tok) * C + ch);
        }
      }
  return nn::gather(tokens, original, std::move(index));
}

// ---- RTPE ------------------------------------------------------------------------

std::ptrdiff_t RTPETable::index(std::size_t head, int dt, int dh, int dw) const {
  if (dt < 0) return -1;
  if (dt > t_max) {
    throw ConfigError("temporal difference " + std::to_string(dt) + " exceeds RTPE range " +
                      std::to_string(t_max));
  }
  const int rh = static_cast<int>(win_h) - 1, rw = static_cast<int>(win_w) - 1;
  if (std::abs(dh) > rh || std::abs(dw) > rw || head >= heads) {
    throw ContractError("RTPE lookup outside the window");
  }
  const auto span_h = static_cast<std::size_t>(2 * rh + 1), span_w = static_cast<std::size_t>(2 * rw + 1);
  const auto t_span = static_cast<std::size_t>(t_max + 1);
  return static_cast<std::ptrdiff_t>(
      ((head * t_span + static_cast<std::size_t>(dt)) * span_h + static_cast<std::size_t>(dh + rh)) *
          span_w +
      static_cast<std::size_t>(dw + rw));
}

double RTPETable::lookup(std::size_t head, int dt, int dh, int dw) const {
  const auto i = index(head, dt, dh, dw);
  return i < 0 ? -std::numeric_limits<double>::infinity() : table.value()[static_cast<std::size_t>(i)];
}

int rtpe_t_max(const TemporalProposal& proposal) {
  proposal.validate();
  return proposal.future.back() - proposal.past.front();
}

namespace {

constexpr double kTimeScale = 16.0;

Tensor rtpe_coords(const std::vector<std::array<int, 3>>& cells, const WindowConfig& w) {
  Tensor coords({cells.size(), 3});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    coords[i * 3 + 0] = cells[i][0] / kTimeScale;
    coords[i * 3 + 1] = cells[i][1] / static_cast<double>(w.win_h);
    coords[i * 3 + 2] = cells[i][2] / static_cast<double>(w.win_w);
  }
  return coords;
}

Var rtpe_project(const BoundParams& p, std::size_t layer, Var coords) {
  auto name = [layer](const char* leaf) { return layer_name(layer, leaf); };
  Var h = nn::gelu(nn::affine(coords, p(name("rtpe.fc1.weight")), p(name("rtpe.fc1.bias"))));
  return nn::affine(h, p(name("rtpe.fc2.weight")), p(name("rtpe.fc2.bias")));
}

}  // namespace

RTPETable build_rtpe(const BoundParams& p, std::size_t layer, int t_max) {
  if (t_max < 0) throw ConfigError("RTPE range must be >= 0");
  const auto& cfg = p.config();
  const int rh = static_cast<int>(cfg.window.win_h) - 1, rw = static_cast<int>(cfg.window.win_w) - 1;
  std::vector<std::array<int, 3>> cells;
  for (int dt = 0; dt <= t_max; ++dt)
    for (int dh = -rh; dh <= rh; ++dh)
      for (int dw = -rw; dw <= rw; ++dw) cells.push_back({dt, dh, dw});
  Var per_cell = rtpe_project(p, layer, p.tape().constant(rtpe_coords(cells, cfg.window)));
  // [cells, heads] -> [heads, T, 2h-1, 2w-1]
  Var table = nn::reshape(nn::permute(per_cell, {1, 0}),
                          {cfg.heads, static_cast<std::size_t>(t_max + 1),
                           static_cast<std::size_t>(2 * rh + 1), static_cast<std::size_t>(2 * rw + 1)});
  return {t_max, cfg.window.win_h, cfg.window.win_w, cfg.heads, table};
}

std::vector<double> rtpe_direct(const ModelParams& params, std::size_t layer, int dt, int dh, int dw) {
  Tape tape(false);
  BoundParams p(tape, params, false);
  Var out = rtpe_project(p, layer, tape.constant(rtpe_coords({{dt, dh, dw}}, params.config.window)));
  const auto v = out.value().values();
  return {v.begin(), v.end()};
}

// ---- TAT layer ----------------------------------------------------------------------

Var tat_layer(const BoundParams& p, std::size_t layer, Var queries, Var keys, Var values,
              const std::vector<int>& query_times, const std::vector<int>& key_times,
              const std::optional<RTPETable>& rtpe, AttentionProbe* probe) {
  const auto& cfg = p.config();
  require_rank4(queries, "queries");
  require_rank4(keys, "keys");
  if (keys.shape() != values.shape()) {
    throw ShapeError("keys " + nn::to_string(keys.shape()) + " and values " +
                     nn::to_string(values.shape()) + " differ");
  }
  const Shape qs = queries.shape();
  const std::size_t C = cfg.channels;
  if (qs[3] != C || keys.shape()[3] != C || qs[1] != keys.shape()[1] || qs[2] != keys.shape()[2]) {
    throw ShapeError("queries " + nn::to_string(qs) + " and keys " + nn::to_string(keys.shape()) +
                     " disagree with channels " + std::to_string(C));
  }
  if (query_times.size() != qs[0] || key_times.size() != keys.shape()[0]) {
    throw ShapeError("time stamps do not match temporal extents");
  }
  for (std::size_t i = 1; i < key_times.size(); ++i) {
    if (key_times[i] <= key_times[i - 1]) throw ContractError("key times must be ascending");
  }

  std::vector<int> ktimes = key_times;
  const std::size_t keep = std::min(key_times.size(), cfg.window.win_t + 1);
  if (keep < key_times.size()) {
    const std::size_t first = key_times.size() - keep;
    keys = slice_leading(keys, first, keep);
    values = slice_leading(values, first, keep);
    ktimes.assign(key_times.begin() + static_cast<std::ptrdiff_t>(first), key_times.end());
  }

  auto name = [layer](const char* leaf) { return layer_name(layer, leaf); };
  const WindowConfig qcfg{qs[0], cfg.window.win_h, cfg.window.win_w};
  const WindowConfig kcfg{keep, cfg.window.win_h, cfg.window.win_w};

  Var qn = nn::layer_norm(queries, p(name("ln1.gain")), p(name("ln1.bias")), cfg.ln_eps);
  const auto qpart = window_partition(qn, qcfg);
  const auto kpart = window_partition(keys, kcfg);
  const auto vpart = window_partition(values, kcfg);

  const std::size_t n_win = qpart.tokens.shape()[0];
  const std::size_t nq = qpart.tokens.shape()[1], nk = kpart.tokens.shape()[1];
  const std::size_t heads = cfg.heads, d = C / heads;

  Var q = nn::affine(qpart.tokens, p(name("q.weight")), p(name("q.bias")));
  Var k = nn::affine(kpart.tokens, p(name("k.weight")), p(name("k.bias")));
  Var v = nn::matmul(vpart.tokens, p(name("v.weight")));
  q = nn::permute(nn::reshape(q, {n_win, nq, heads, d}), {0, 2, 1, 3});
  k = nn::permute(nn::reshape(k, {n_win, nk, heads, d}), {0, 2, 3, 1});
  v = nn::permute(nn::reshape(v, {n_win, nk, heads, d}), {0, 2, 1, 3});

  Var logits = nn::scale(nn::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(d)));

  // Token coordinates inside a window.
  const std::size_t plane = cfg.window.win_h * cfg.window.win_w;
  auto coord = [&](std::size_t tok) {
    return std::array<int, 3>{static_cast<int>(tok / plane),
                              static_cast<int>((tok % plane) / cfg.window.win_w),
                              static_cast<int>(tok % cfg.window.win_w)};
  };
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const Shape full{n_win, heads, nq, nk};
  Tensor mask(full, 0.0);
  std::vector<std::ptrdiff_t> bias_index(rtpe ? mask.size() : 0, -1);
  for (std::size_t w = 0; w < n_win; ++w)
    for (std::size_t i = 0; i < nq; ++i) {
      const auto qc = coord(i);
      const int tq = query_times[static_cast<std::size_t>(qc[0])];
      for (std::size_t j = 0; j < nk; ++j) {
        const auto kc = coord(j);
        const int dt = tq - ktimes[static_cast<std::size_t>(kc[0])];
        const bool blocked = !kpart.valid[w * nk + j] || dt < 0;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t at = ((w * heads + h) * nq + i) * nk + j;
          if (blocked) {
            mask[at] = neg_inf;
          } else if (rtpe) {
            bias_index[at] = rtpe->index(h, dt, qc[1] - kc[1], qc[2] - kc[2]);
          }
        }
      }
    }
  if (rtpe) logits = nn::add(logits, nn::gather(rtpe->table, full, std::move(bias_index)));
  logits = nn::add(logits, p.tape().constant(std::move(mask)));
  Var attn = nn::softmax(logits, 3);
  if (probe) {
    probe->weights = attn.value();
    probe->query_time.resize(nq);
    probe->key_time.resize(nk);
    for (std::size_t i = 0; i < nq; ++i) probe->query_time[i] = query_times[static_cast<std::size_t>(coord(i)[0])];
    for (std::size_t j = 0; j < nk; ++j) probe->key_time[j] = ktimes[static_cast<std::size_t>(coord(j)[0])];
  }

  Var mixed = nn::reshape(nn::permute(nn::matmul(attn, v), {0, 2, 1, 3}), {n_win, nq, C});
  mixed = nn::matmul(mixed, p(name("o.weight")));
  Var q1 = nn::add(queries, window_reverse(mixed, qcfg, qs));

  Var h = nn::layer_norm(q1, p(name("ln2.gain")), p(name("ln2.bias")), cfg.ln_eps);
  h = nn::gelu(nn::affine(h, p(name("mlp.fc1.weight")), p(name("mlp.fc1.bias"))));
  h = nn::affine(h, p(name("mlp.fc2.weight")), p(name("mlp.fc2.bias")));
  return nn::add(q1, h);
}

// ---- neck / forward -------------------------------------------------------------------

Var neck_forward(const BoundParams& p, Var current, const std::vector<Var>& past,
                 const TemporalProposal& proposal) {
  proposal.validate();
  const auto& cfg = p.config();
  if (past.size() != proposal.past.size()) {
    throw ContractError("buffered features (" + std::to_string(past.size()) +
                        ") do not match proposal " + to_string(proposal));
  }
  if (current.shape().size() != 3 || current.shape()[2] != cfg.channels) {
    throw ShapeError("current features must be [H,W,C], got " + nn::to_string(current.shape()));
  }
  for (const auto& f : past) {
    if (f.shape() != current.shape()) {
      throw ShapeError("buffered feature " + nn::to_string(f.shape()) + " differs from current " +
                       nn::to_string(current.shape()));
    }
  }
  const std::size_t tf = proposal.future.size();
  Var queries = replicate(current, tf);

  std::vector<Var> slots;
  for (const auto& f : past) slots.push_back(nn::reshape(f, {1, f.shape()[0], f.shape()[1], f.shape()[2]}));
  slots.push_back(nn::reshape(current, {1, current.shape()[0], current.shape()[1], current.shape()[2]}));
  Var keys = nn::concat(slots);
  Var present = replicate(current, slots.size());
  Var values = keys;
  if (cfg.values == ValueMode::kPresentMinusPast) values = nn::sub(present, keys);
  if (cfg.values == ValueMode::kPastMinusPresent) values = nn::sub(keys, present);

  if (!cfg.use_tat) {
    // Latest motion delta through one affine map, shared by every horizon.
    Var delta = replicate(nn::sub(current, past.back()), tf);
    return nn::add(queries, nn::affine(delta, p("shortcut.weight"), p("shortcut.bias")));
  }

  std::vector<int> key_times = proposal.past;
  key_times.push_back(0);
  const int t_max = rtpe_t_max(proposal);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::optional<RTPETable> table;
    if (cfg.use_rtpe) table = build_rtpe(p, l, t_max);
    queries = tat_layer(p, l, queries, keys, values, proposal.future, key_times, table);
  }
  return queries;
}

Var neck_forward(const BoundParams& p, Var current, const std::vector<FeatureMap>& buffered,
                 const TemporalProposal& proposal) {
  proposal.validate();
  if (buffered.size() != proposal.past.size()) {
    throw ContractError("buffered features (" + std::to_string(buffered.size()) +
                        ") do not match proposal " + to_string(proposal));
  }
  auto& tape = *current.tape();
  std::vector<Var> past;
  for (std::size_t i = 0; i < buffered.size(); ++i) {
    if (buffered[i].source_index != proposal.past[i]) {
      throw ContractError("buffered feature index " + std::to_string(buffered[i].source_index) +
                          " does not match proposal " + to_string(proposal));
    }
    past.push_back(tape.constant(buffered[i].grid));
  }
  return neck_forward(p, current, past, proposal);
}

namespace {

std::vector<metrics::DetectionSet> decode_all(const ModelConfig& cfg, const Tensor& raw,
                                              std::size_t gh, std::size_t gw,
                                              const std::vector<int>& future) {
  DecodeConfig dc{cfg.score_threshold, cfg.nms_iou, cfg.patch,
                  static_cast<double>(gw * cfg.patch), static_cast<double>(gh * cfg.patch)};
  const std::size_t per = raw.size() / future.size();
  std::vector<metrics::DetectionSet> out;
  for (std::size_t j = 0; j < future.size(); ++j) {
    Tensor slice({gh * gw, 5 + cfg.num_classes},
                 std::vector<double>(raw.values().begin() + static_cast<std::ptrdiff_t>(j * per),
                                     raw.values().begin() + static_cast<std::ptrdiff_t>((j + 1) * per)));
    out.push_back(decode_head(slice, gh, gw, dc, future[j]));
  }
  return out;
}

}  // namespace

std::vector<metrics::DetectionSet> transtreamer_forward(const ModelParams& params,
                                                        const FeatureMap& current,
                                                        const std::vector<FeatureMap>& buffered,
                                                        const TemporalProposal& proposal) {
  Tape tape(false);
  BoundParams p(tape, params, false);
  Var future = neck_forward(p, tape.constant(current.grid), buffered, proposal);
  Var raw = head_raw(p, future);
  return decode_all(params.config, raw.value(), current.grid.dim(0), current.grid.dim(1),
                    proposal.future);
}

std::vector<metrics::DetectionSet> transtreamer_forward(const ModelParams& params,
                                                        const Tensor& current_image,
                                                        const std::vector<FeatureMap>& buffered,
                                                        const TemporalProposal& proposal) {
  return transtreamer_forward(params, compute_features(params, current_image, 0), buffered, proposal);
}

}  // namespace tstream::model
