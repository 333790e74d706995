#include "sdtc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sdtc/error.hpp"

namespace sdtc {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ShapeError("use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::constant(Tensor value) { return record("constant", std::move(value), {}, nullptr); }

Var Tape::variable(Tensor value) {
  if (!value.all_finite()) throw NumericError("variable holds non-finite values");
  nodes_.push_back(Node{std::move(value), {}, true, nullptr});
  backward_done_ = false;
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ShapeError("Var does not belong to this tape");
}

const Tensor& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id_].value;
}

const Tensor& Tape::grad(Var v) const {
  check_owner(v);
  if (!backward_done_) throw NumericError("grad() requested before backward()");
  return nodes_[v.id_].grad;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("operation '" + std::string(op) + "' produced non-finite values");
  }
  bool needs_grad = false;
  for (auto id : inputs) needs_grad = needs_grad || nodes_.at(id).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backward) : nullptr});
  backward_done_ = false;
  return Var(this, nodes_.size() - 1);
}

double* Tape::grad_sink(std::size_t id) {
  auto& node = nodes_[id];
  return node.requires_grad ? node.grad.data() : nullptr;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (nodes_[loss.id_].value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(nodes_[loss.id_].value.shape()));
  }
  for (auto& node : nodes_) node.grad = Tensor::zeros(node.value.shape());
  nodes_[loss.id_].grad[0] = 1.0;
  // Nodes after the loss cannot contribute to it.
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.backward) node.backward(*this, id);
  }
  backward_done_ = true;
}

namespace ad {
namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw ShapeError(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <typename Fwd, typename Deriv>
Var unary(Var a, const char* name, Fwd fwd, Deriv deriv) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return tape.record(name, std::move(y), {a.id()}, [ia = a.id(), deriv](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ia);
    const auto& g = t.grad_at(self);
    const auto& x = t.value_at(ia);
    const auto& y = t.value_at(self);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(x.shape()) + " and " + shape_string(w.shape()));
  }
  if (a.tape() != b.tape()) throw ShapeError("matmul: operands on different tapes");
  const std::size_t n = x.extent(0), k = x.extent(1), m = w.extent(1);
  Tensor y({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* yr = y.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* wr = w.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += xv * wr[j];
    }
  }
  return a.tape()->record("matmul", std::move(y), {a.id(), b.id()}, [ia = a.id(), ib = b.id(), n, k, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const auto& x = t.value_at(ia);
    const auto& w = t.value_at(ib);
    if (double* gx = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* wr = w.data() + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gr[j] * wr[j];
          gx[i * k + p] += acc;
        }
      }
    }
    if (double* gw = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* gr = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          double* gwr = gw + p * m;
          for (std::size_t j = 0; j < m; ++j) gwr[j] += xv * gr[j];
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape()->record("add", std::move(y), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    for (auto id : {ia, ib}) {
      if (double* gx = t.grad_sink(id)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape()->record("sub", std::move(y), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    if (double* ga = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape()->record("mul", std::move(y), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const auto& av = t.value_at(ia);
    const auto& bv = t.value_at(ib);
    if (double* ga = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (double* gb = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  return unary(a, "scale", [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Var add_bias(Var a, Var bias) {
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || b.rank() != 1 || b.extent(0) != x.extent(1)) {
    throw ShapeError("add_bias: incompatible shapes " + shape_string(x.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t n = x.extent(0), m = x.extent(1);
  Tensor y = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] += b[j];
  }
  return a.tape()->record("add_bias", std::move(y), {a.id(), bias.id()}, [ia = a.id(), ib = bias.id(), n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    if (double* gx = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (double* gb = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
      }
    }
  });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var conv2d(Var input, Var kernels, Var bias, std::size_t stride_rows, std::size_t stride_cols) {
  const Tensor& in = input.value();
  const Tensor& k = kernels.value();
  const Tensor& b = bias.value();
  if (stride_rows == 0 || stride_cols == 0) throw ShapeError("conv2d: stride must be positive");
  if (in.rank() != 3 && in.rank() != 4) throw ShapeError("conv2d: input must be [H,W,C] or [N,H,W,C]");
  if (k.rank() != 4) throw ShapeError("conv2d: kernels must be [kh,kw,Cin,M]");
  const bool batched = in.rank() == 4;
  const std::size_t batch = batched ? in.extent(0) : 1;
  const std::size_t h = in.extent(batched ? 1 : 0);
  const std::size_t w = in.extent(batched ? 2 : 1);
  const std::size_t cin = in.extent(batched ? 3 : 2);
  const std::size_t kh = k.extent(0), kw = k.extent(1), m = k.extent(3);
  if (k.extent(2) != cin) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(k.extent(2)) + " != " + std::to_string(cin));
  }
  if (kh > h || kw > w) {
    throw ShapeError("conv2d: kernel " + shape_string({kh, kw}) + " larger than input " + shape_string({h, w}));
  }
  if (b.rank() != 1 || b.extent(0) != m) throw ShapeError("conv2d: bias must have one entry per filter");
  const std::size_t oh = (h - kh) / stride_rows + 1;
  const std::size_t ow = (w - kw) / stride_cols + 1;

  Shape out_shape = batched ? Shape{batch, oh, ow, m} : Shape{oh, ow, m};
  Tensor out(out_shape);
  for (std::size_t n = 0; n < batch; ++n) {
    const double* img = in.data() + n * h * w * cin;
    double* dst = out.data() + n * oh * ow * m;
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        double* o = dst + (r * ow + c) * m;
        for (std::size_t f = 0; f < m; ++f) o[f] = b[f];
        for (std::size_t a = 0; a < kh; ++a) {
          for (std::size_t bb = 0; bb < kw; ++bb) {
            const double* px = img + ((r * stride_rows + a) * w + (c * stride_cols + bb)) * cin;
            const double* kr = k.data() + (a * kw + bb) * cin * m;
            for (std::size_t ch = 0; ch < cin; ++ch) {
              const double xv = px[ch];
              const double* kc = kr + ch * m;
              for (std::size_t f = 0; f < m; ++f) o[f] += xv * kc[f];
            }
          }
        }
      }
    }
  }

  auto backward = [ii = input.id(), ik = kernels.id(), ib = bias.id(), batch, h, w, cin, kh, kw, m, oh, ow,
                   sr = stride_rows, sc = stride_cols](Tape& t, std::size_t self) {
    const auto& g = t.grad_at(self);
    const auto& in = t.value_at(ii);
    const auto& k = t.value_at(ik);
    double* gin = t.grad_sink(ii);
    double* gk = t.grad_sink(ik);
    double* gb = t.grad_sink(ib);
    for (std::size_t n = 0; n < batch; ++n) {
      const double* img = in.data() + n * h * w * cin;
      double* gimg = gin ? gin + n * h * w * cin : nullptr;
      const double* gsrc = g.data() + n * oh * ow * m;
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const double* go = gsrc + (r * ow + c) * m;
          if (gb) {
            for (std::size_t f = 0; f < m; ++f) gb[f] += go[f];
          }
          for (std::size_t a = 0; a < kh; ++a) {
            for (std::size_t bb = 0; bb < kw; ++bb) {
              const std::size_t pix = ((r * sr + a) * w + (c * sc + bb)) * cin;
              const std::size_t kof = (a * kw + bb) * cin * m;
              for (std::size_t ch = 0; ch < cin; ++ch) {
                const double* kc = k.data() + kof + ch * m;
                if (gimg) {
                  double acc = 0.0;
                  for (std::size_t f = 0; f < m; ++f) acc += go[f] * kc[f];
                  gimg[pix + ch] += acc;
                }
                if (gk) {
                  const double xv = img[pix + ch];
                  double* gkc = gk + kof + ch * m;
                  for (std::size_t f = 0; f < m; ++f) gkc[f] += xv * go[f];
                }
              }
            }
          }
        }
      }
    }
  };
  return input.tape()->record("conv2d", std::move(out), {input.id(), kernels.id(), bias.id()}, std::move(backward));
}

Var softmax(Var x, std::size_t axis) {
  Tensor y = sdtc::softmax(x.value(), axis);
  const AxisSplit s = split_at(y.shape(), axis);
  return x.tape()->record("softmax", std::move(y), {x.id()}, [ix = x.id(), s](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ix);
    const auto& g = t.grad_at(self);
    const auto& y = t.value_at(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t idx = (o * s.extent + e) * s.inner + in;
          dot += g[idx] * y[idx];
        }
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t idx = (o * s.extent + e) * s.inner + in;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

namespace {

// Shared helper for sum/mean: y = factor * sum over the reduced positions.
Var scaled_reduce(Var x, std::optional<std::size_t> axis, bool average, const char* name) {
  const Tensor& v = x.value();
  AxisSplit s;
  Shape out_shape;
  if (axis) {
    s = split_at(v.shape(), *axis);
    out_shape = drop_axis(v.shape(), *axis);
  } else {
    s.extent = v.size();
    out_shape = {1};
  }
  const double factor = average ? 1.0 / static_cast<double>(s.extent) : 1.0;
  Tensor y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      for (std::size_t in = 0; in < s.inner; ++in) y[o * s.inner + in] += v[(o * s.extent + e) * s.inner + in];
    }
  }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= factor;
  return x.tape()->record(name, std::move(y), {x.id()}, [ix = x.id(), s, factor](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ix);
    const auto& g = t.grad_at(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.extent + e) * s.inner + in] += factor * g[o * s.inner + in];
      }
    }
  });
}

}  // namespace

Var sum(Var x, std::optional<std::size_t> axis) { return scaled_reduce(x, axis, false, "sum"); }

Var mean(Var x, std::optional<std::size_t> axis) { return scaled_reduce(x, axis, true, "mean"); }

Var l2_norm(Var x, std::optional<std::size_t> axis) {
  const Tensor& v = x.value();
  AxisSplit s;
  Shape out_shape;
  if (axis) {
    s = split_at(v.shape(), *axis);
    out_shape = drop_axis(v.shape(), *axis);
  } else {
    s.extent = v.size();
    out_shape = {1};
  }
  Tensor y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double z = v[(o * s.extent + e) * s.inner + in];
        acc += z * z;
      }
      y[o * s.inner + in] = std::sqrt(acc);
    }
  }
  return x.tape()->record("l2_norm", std::move(y), {x.id()}, [ix = x.id(), s](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ix);
    const auto& g = t.grad_at(self);
    const auto& y = t.value_at(self);
    const auto& v = t.value_at(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double norm = y[o * s.inner + in];
        if (norm == 0.0) continue;  // subgradient 0 at the origin
        const double coef = g[o * s.inner + in] / norm;
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t idx = (o * s.extent + e) * s.inner + in;
          gx[idx] += coef * v[idx];
        }
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", std::move(y), {x.id()}, [ix = x.id()](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ix);
    const auto& g = t.grad_at(self);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& v = x.value();
  const AxisSplit s = split_at(v.shape(), axis);
  if (begin >= end || end > s.extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_string(v.shape()));
  }
  Shape out_shape = v.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  Tensor y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = v.data() + (o * s.extent + begin) * s.inner;
    std::copy(src, src + len * s.inner, y.data() + o * len * s.inner);
  }
  return x.tape()->record("slice", std::move(y), {x.id()}, [ix = x.id(), s, begin, len](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(ix);
    const auto& g = t.grad_at(self);
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx + (o * s.extent + begin) * s.inner;
      const double* src = g.data() + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Var select(Var x, std::size_t axis, std::size_t index) {
  Var sliced = slice(x, axis, index, index + 1);
  return reshape(sliced, drop_axis(x.shape(), axis));
}

Var squash(Var s) {
  constexpr double kEps = 1e-12;
  const Tensor& v = s.value();
  if (v.rank() == 0) throw ShapeError("squash: empty shape");
  const std::size_t dim = v.shape().back();
  const std::size_t count = v.size() / dim;
  Tensor y(v.shape());
  for (std::size_t c = 0; c < count; ++c) {
    const double* x = v.data() + c * dim;
    double sq = 0.0;
    for (std::size_t d = 0; d < dim; ++d) sq += x[d] * x[d];
    const double norm = std::sqrt(sq);
    const double factor = sq / ((1.0 + sq) * (norm + kEps));
    for (std::size_t d = 0; d < dim; ++d) y[c * dim + d] = factor * x[d];
  }
  return s.tape()->record("squash", std::move(y), {s.id()}, [is = s.id(), dim, count](Tape& t, std::size_t self) {
    double* gx = t.grad_sink(is);
    const auto& g = t.grad_at(self);
    const auto& v = t.value_at(is);
    for (std::size_t c = 0; c < count; ++c) {
      const double* x = v.data() + c * dim;
      const double* gc = g.data() + c * dim;
      double sq = 0.0, gdot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        sq += x[d] * x[d];
        gdot += gc[d] * x[d];
      }
      const double norm = std::sqrt(sq);
      const double den = (1.0 + sq) * (norm + kEps);
      const double factor = sq / den;
      // d factor / d norm, then chain through d norm / d x = x / norm.
      const double dden = 2.0 * norm * (norm + kEps) + (1.0 + sq);
      const double dfactor = (2.0 * norm * den - sq * dden) / (den * den);
      const double radial = norm > 0.0 ? dfactor * gdot / norm : 0.0;
      for (std::size_t d = 0; d < dim; ++d) gx[c * dim + d] += factor * gc[d] + radial * x[d];
    }
  });
}

Var capsule_predict(Var u, Var transforms) {
  const Tensor& uv = u.value();
  const Tensor& w = transforms.value();
  if (uv.rank() != 3 || w.rank() != 4 || w.extent(0) != uv.extent(1) || w.extent(3) != uv.extent(2)) {
    throw ShapeError("capsule_predict: incompatible shapes " + shape_string(uv.shape()) + " and " +
                     shape_string(w.shape()));
  }
  const std::size_t n = uv.extent(0), in = uv.extent(1), d = uv.extent(2);
  const std::size_t out = w.extent(1), da = w.extent(2);
  Tensor y({n, in, out, da});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < in; ++i) {
      const double* ui = uv.data() + (b * in + i) * d;
      const double* wi = w.data() + i * out * da * d;
      double* yi = y.data() + (b * in + i) * out * da;
      for (std::size_t r = 0; r < out * da; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += wi[r * d + c] * ui[c];
        yi[r] = acc;
      }
    }
  }
  return u.tape()->record("capsule_predict", std::move(y), {u.id(), transforms.id()},
                          [iu = u.id(), iw = transforms.id(), n, in, d, out, da](Tape& t, std::size_t self) {
                            const auto& g = t.grad_at(self);
                            const auto& uv = t.value_at(iu);
                            const auto& w = t.value_at(iw);
                            double* gu = t.grad_sink(iu);
                            double* gw = t.grad_sink(iw);
                            for (std::size_t b = 0; b < n; ++b) {
                              for (std::size_t i = 0; i < in; ++i) {
                                const double* ui = uv.data() + (b * in + i) * d;
                                const double* wi = w.data() + i * out * da * d;
                                const double* gi = g.data() + (b * in + i) * out * da;
                                for (std::size_t r = 0; r < out * da; ++r) {
                                  const double gr = gi[r];
                                  if (gu) {
                                    for (std::size_t c = 0; c < d; ++c) gu[(b * in + i) * d + c] += gr * wi[r * d + c];
                                  }
                                  if (gw) {
                                    double* gwr = gw + i * out * da * d + r * d;
                                    for (std::size_t c = 0; c < d; ++c) gwr[c] += gr * ui[c];
                                  }
                                }
                              }
                            }
                          });
}

Var coupled_sum(Var predictions, const Tensor& coupling) {
  const Tensor& p = predictions.value();
  if (p.rank() != 4 || coupling.rank() != 3 || coupling.extent(0) != p.extent(0) ||
      coupling.extent(1) != p.extent(1) || coupling.extent(2) != p.extent(2)) {
    throw ShapeError("coupled_sum: incompatible shapes " + shape_string(p.shape()) + " and " +
                     shape_string(coupling.shape()));
  }
  const std::size_t n = p.extent(0), in = p.extent(1), out = p.extent(2), da = p.extent(3);
  Tensor y({n, out, da});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t j = 0; j < out; ++j) {
        const double c = coupling[(b * in + i) * out + j];
        const double* src = p.data() + ((b * in + i) * out + j) * da;
        double* dst = y.data() + (b * out + j) * da;
        for (std::size_t e = 0; e < da; ++e) dst[e] += c * src[e];
      }
    }
  }
  return predictions.tape()->record(
      "coupled_sum", std::move(y), {predictions.id()},
      [ip = predictions.id(), coupling, n, in, out, da](Tape& t, std::size_t self) {
        double* gp = t.grad_sink(ip);
        const auto& g = t.grad_at(self);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < in; ++i) {
            for (std::size_t j = 0; j < out; ++j) {
              const double c = coupling[(b * in + i) * out + j];
              const double* gs = g.data() + (b * out + j) * da;
              double* dst = gp + ((b * in + i) * out + j) * da;
              for (std::size_t e = 0; e < da; ++e) dst[e] += c * gs[e];
            }
          }
        }
      });
}

}  // namespace ad

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t extent = x.shape()[axis];
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e) top = std::max(top, x[(o * extent + e) * inner + in]);
      double total = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t idx = (o * extent + e) * inner + in;
        y[idx] = std::exp(x[idx] - top);
        total += y[idx];
      }
      for (std::size_t e = 0; e < extent; ++e) y[(o * extent + e) * inner + in] /= total;
    }
  }
  return y;
}

}  // namespace sdtc
