#include "tstream/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "tstream/errors.hpp"

namespace tstream::nn {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward,
                 const char* op_name) {
  Node node;
  node.value = std::move(value);
  node.op = op_name;
  node.is_leaf = false;
  node.requires_grad =
      record_ && std::any_of(inputs.begin(), inputs.end(),
                             [this](std::size_t id) { return nodes_[id].requires_grad; });
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::accumulator(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad.values();
}

Tensor Tape::grad(Var v) const {
  const auto& node = nodes_.at(v.id());
  if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (value(loss.id()).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        to_string(value(loss.id()).shape()));
  }
  for (auto& node : nodes_) node.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Tensor(value(loss.id()).shape(), 1.0);

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.grad.empty() || node.is_leaf) continue;
    if (!node.backward) {
      throw UnsupportedOpError(std::string("no gradient rule recorded for op '") + node.op + "'");
    }
    node.backward(*this, id);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands live on different tapes");
  }
  return *a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// GA[m,k] += GC[m,n] * B[k,n]^T
void gemm_grad_a(const double* gc, const double* b, double* ga, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = gc + i * n;
    double* garow = ga + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      garow[p] += acc;
    }
  }
}

// GB[k,n] += A[m,k]^T * GC[m,n]
void gemm_grad_b(const double* a, const double* gc, double* gb, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = gc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* gbrow = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Var unary(Var x, const char* name, Fwd fwd, Deriv deriv) {
  auto& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  return tape.record(std::move(out), {xid},
                     [xid, deriv](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       const auto& xs = t.value(xid);
                       auto gx = t.accumulator(xid);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xs[i]);
                     },
                     name);
}

}  // namespace

Var add(Var a, Var b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [ia, ib](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       for (auto id : {ia, ib}) {
                         if (!t.requires_grad(id)) continue;
                         auto acc = t.accumulator(id);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                       }
                     },
                     "add");
}

Var sub(Var a, Var b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [ia, ib](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       if (t.requires_grad(ia)) {
                         auto acc = t.accumulator(ia);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto acc = t.accumulator(ib);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= g[i];
                       }
                     },
                     "sub");
}

Var mul(Var a, Var b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [ia, ib](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       const auto& av = t.value(ia);
                       const auto& bv = t.value(ib);
                       if (t.requires_grad(ia)) {
                         auto acc = t.accumulator(ia);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * bv[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto acc = t.accumulator(ib);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * av[i];
                       }
                     },
                     "mul");
}

Var scale(Var a, double factor) {
  return unary(
      a, "scale", [factor](double v) { return v * factor; },
      [factor](double) { return factor; });
}

Var add_bias(Var x, Var b) {
  auto& tape = same_tape(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  const std::size_t n = xv.shape().back();
  if (bv.size() != n) {
    throw ShapeError("add_bias: bias " + to_string(bv.shape()) + " vs input " +
                     to_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  const std::size_t ix = x.id(), ib = b.id();
  return tape.record(std::move(out), {ix, ib},
                     [ix, ib, n](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       if (t.requires_grad(ix)) {
                         auto acc = t.accumulator(ix);
                         for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto acc = t.accumulator(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) acc[i % n] += g[i];
                       }
                     },
                     "add_bias");
}

Var matmul(Var a, Var b) {
  auto& tape = same_tape(a, b);
  const auto& as = a.value().shape();
  const auto& bs = b.value().shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(as) + " @ " +
                     to_string(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) {
    throw ShapeError("matmul inner extents differ: " + to_string(as) + " @ " + to_string(bs));
  }
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  Shape out_shape;
  std::size_t batch = 1;
  bool share_a = false, share_b = false;
  if (b_batch.empty()) {
    out_shape = a_batch;
    batch = numel(a_batch);
    share_b = true;
  } else if (a_batch.empty()) {
    out_shape = b_batch;
    batch = numel(b_batch);
    share_a = true;
  } else if (a_batch == b_batch) {
    out_shape = a_batch;
    batch = numel(a_batch);
  } else {
    throw ShapeError("matmul batch dims not broadcastable: " + to_string(as) + " @ " +
                     to_string(bs));
  }
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tensor out(out_shape, 0.0);
  const double* ap = a.value().data();
  const double* bp = b.value().data();
  if (share_b) {
    gemm_acc(ap, bp, out.data(), batch * m, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm_acc(ap + (share_a ? 0 : i * m * k), bp + i * k * n, out.data() + i * m * n, m, k, n);
    }
  }

  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {ia, ib},
      [=](Tape& t, std::size_t self) {
        const double* g = t.grad_of(self).data();
        const double* av = t.value(ia).data();
        const double* bv = t.value(ib).data();
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        double* ga = need_a ? t.accumulator(ia).data() : nullptr;
        double* gb = need_b ? t.accumulator(ib).data() : nullptr;
        if (share_b) {
          if (ga) gemm_grad_a(g, bv, ga, batch * m, k, n);
          if (gb) gemm_grad_b(av, g, gb, batch * m, k, n);
          return;
        }
        for (std::size_t i = 0; i < batch; ++i) {
          const std::size_t aoff = share_a ? 0 : i * m * k;
          if (ga) gemm_grad_a(g + i * m * n, bv + i * k * n, ga + aoff, m, k, n);
          if (gb) gemm_grad_b(av + aoff, g + i * m * n, gb + i * k * n, m, k, n);
        }
      },
      "matmul");
}

Var softmax(Var x, std::size_t axis) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  check_finite(xv, "softmax");
  const auto& s = xv.shape();
  if (axis >= s.size()) throw ShapeError("softmax axis out of range for " + to_string(s));
  const std::size_t len = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  Tensor out(s, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      if (std::isinf(mx) && mx < 0) continue;  // fully masked row stays zero
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {ix},
                     [=](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       const auto& y = t.value(self);
                       auto gx = t.accumulator(ix);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * len * inner + in;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < len; ++j) {
                             dot += g[base + j * inner] * y[base + j * inner];
                           }
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t p = base + j * inner;
                             gx[p] += y[p] * (g[p] - dot);
                           }
                         }
                       }
                     },
                     "softmax");
}

Var log_softmax(Var x) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  check_finite(xv, "log_softmax");
  const std::size_t len = xv.shape().back();
  const std::size_t rows = xv.size() / len;
  Tensor out(xv.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    if (!std::isfinite(mx)) throw NumericError("log_softmax: row without finite entries");
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lse;
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {ix},
                     [=](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       const auto& y = t.value(self);
                       auto gx = t.accumulator(ix);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gsum = 0.0;
                         for (std::size_t j = 0; j < len; ++j) gsum += g[r * len + j];
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t p = r * len + j;
                           gx[p] += g[p] - std::exp(y[p]) * gsum;
                         }
                       }
                     },
                     "log_softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be > 0");
  auto& tape = same_tape(x, gain);
  same_tape(x, bias);
  const auto& xv = x.value();
  const std::size_t n = xv.shape().back();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  const std::size_t rows = xv.size() / n;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape(), 0.0);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      std::move(out), {ix, ig, ib},
      [=](Tape& t, std::size_t self) {
        const auto& g = t.grad_of(self);
        const auto& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          auto acc = t.accumulator(ig);
          for (std::size_t i = 0; i < g.size(); ++i) acc[i % n] += g[i] * (*xhat)[i];
        }
        if (t.requires_grad(ib)) {
          auto acc = t.accumulator(ib);
          for (std::size_t i = 0; i < g.size(); ++i) acc[i % n] += g[i];
        }
        if (!t.requires_grad(ix)) return;
        auto gx = t.accumulator(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gv[j];
            m1 += gh;
            m2 += gh * (*xhat)[r * n + j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gv[j];
            gx[r * n + j] += (*rstd)[r] * (gh - m1 - (*xhat)[r * n + j] * m2);
          }
        }
      },
      "layer_norm");
}

Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double a = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v) {
        const double th = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * a * v * v);
      });
}

Var softplus(Var x) {
  return unary(
      x, "softplus",
      [](double v) { return std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0); },
      [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Var abs(Var x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sum(Var x) {
  auto& tape = *x.tape();
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  const std::size_t ix = x.id();
  return tape.record(Tensor::scalar(total), {ix},
                     [ix](Tape& t, std::size_t self) {
                       const double g = t.grad_of(self)[0];
                       for (auto& v : t.accumulator(ix)) v += g;
                     },
                     "sum");
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var gather(Var x, Shape out_shape, std::vector<std::ptrdiff_t> index) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (numel(out_shape) != index.size()) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " +
                     to_string(out_shape));
  }
  Tensor out(std::move(out_shape), 0.0);
  const auto limit = static_cast<std::ptrdiff_t>(xv.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto src = index[i];
    if (src >= limit) throw ShapeError("gather: index out of range for " + to_string(xv.shape()));
    if (src >= 0) out[i] = xv[static_cast<std::size_t>(src)];
  }
  const std::size_t ix = x.id();
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(index));
  return tape.record(std::move(out), {ix},
                     [ix, idx](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       auto gx = t.accumulator(ix);
                       for (std::size_t i = 0; i < idx->size(); ++i) {
                         const auto src = (*idx)[i];
                         if (src >= 0) gx[static_cast<std::size_t>(src)] += g[i];
                       }
                     },
                     "gather");
}

Var reshape(Var x, Shape shape) {
  auto& tape = *x.tape();
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {ix},
                     [ix](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       auto gx = t.accumulator(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     },
                     "reshape");
}

std::vector<std::ptrdiff_t> permute_index(const Shape& shape, const std::vector<std::size_t>& axes,
                                          Shape* out_shape) {
  const std::size_t r = shape.size();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch for " + to_string(shape));
  std::vector<bool> seen(r, false);
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw ShapeError("permute: invalid axes");
    seen[axes[i]] = true;
    os[i] = shape[axes[i]];
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * shape[i + 1];
  const std::size_t total = numel(shape);
  std::vector<std::ptrdiff_t> index(total);
  std::vector<std::size_t> pos(r, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += pos[i] * in_stride[axes[i]];
    index[flat] = static_cast<std::ptrdiff_t>(src);
    for (std::size_t i = r; i-- > 0;) {
      if (++pos[i] < os[i]) break;
      pos[i] = 0;
    }
  }
  if (out_shape) *out_shape = os;
  return index;
}

Var permute(Var x, const std::vector<std::size_t>& axes) {
  Shape out_shape;
  auto index = permute_index(x.value().shape(), axes, &out_shape);
  return gather(x, std::move(out_shape), std::move(index));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  auto& tape = *parts.front().tape();
  const auto& first = parts.front().value().shape();
  const Shape trailing(first.begin() + 1, first.end());
  std::size_t lead = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw ContractError("concat: operands live on different tapes");
    const auto& s = p.value().shape();
    if (Shape(s.begin() + 1, s.end()) != trailing) {
      throw ShapeError("concat: trailing extents differ: " + to_string(first) + " vs " +
                       to_string(s));
    }
    lead += s[0];
    ids.push_back(p.id());
  }
  Shape out_shape = first;
  out_shape[0] = lead;
  std::vector<double> data;
  data.reserve(numel(out_shape));
  for (const auto& p : parts) {
    const auto v = p.value().values();
    data.insert(data.end(), v.begin(), v.end());
  }
  return tape.record(Tensor(std::move(out_shape), std::move(data)), ids,
                     [ids](Tape& t, std::size_t self) {
                       const auto& g = t.grad_of(self);
                       std::size_t off = 0;
                       for (auto id : ids) {
                         const std::size_t n = t.value(id).size();
                         if (t.requires_grad(id)) {
                           auto acc = t.accumulator(id);
                           for (std::size_t i = 0; i < n; ++i) acc[i] += g[off + i];
                         }
                         off += n;
                       }
                     },
                     "concat");
}

Var apply_unrecorded(Var x, const std::function<Tensor(const Tensor&)>& fn) {
  return x.tape()->record(fn(x.value()), {x.id()}, nullptr, "unrecorded");
}

Var affine(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

double grad_check(const ScalarFunction& f, const Tensor& x, double step) {
  Tape tape;
  Var input = tape.leaf(x, true);
  Var loss = f(tape, input);
  if (loss.value().size() != 1) throw ContractError("grad_check: function must be scalar");
  if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: f(x) is not finite");
  tape.backward(loss);
  const Tensor analytic = tape.grad(input);

  auto eval = [&f](const Tensor& at) {
    Tape t(false);
    const double v = f(t, t.leaf(at, false)).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: f(x +/- h) is not finite");
    return v;
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tstream::nn
