#include "sizefit/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sizefit/errors.hpp"

namespace sizefit::tensor {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  values_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  if (numel(shape_) != values_.size())
    throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(values_.size()) +
                     " values");
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != values_.size())
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  return Tensor(std::move(shape), values_);
}

namespace {

std::atomic<Precision> g_precision{Precision::f64};

// C (+)= op(A) * op(B) with row-major storage. A is m x k (k x m when
// trans_a), B is k x n (n x k when trans_b), C is m x n.
template <typename T>
void gemm_impl(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
               T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto mi = static_cast<Eigen::Index>(m), ni = static_cast<Eigen::Index>(n), ki = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += CMap(a, mi, ki) * CMap(b, ki, ni);
  } else if (trans_a && !trans_b) {
    cm.noalias() += CMap(a, ki, mi).transpose() * CMap(b, ki, ni);
  } else if (!trans_a && trans_b) {
    cm.noalias() += CMap(a, mi, ki) * CMap(b, ni, ki).transpose();
  } else {
    cm.noalias() += CMap(a, ki, mi).transpose() * CMap(b, ni, ki).transpose();
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  if (g_precision.load(std::memory_order_relaxed) == Precision::f64) {
    gemm_impl<double>(trans_a, trans_b, m, n, k, a, b, c, accumulate);
    return;
  }
  std::vector<float> af(a, a + m * k), bf(b, b + k * n), cf(m * n);
  gemm_impl<float>(trans_a, trans_b, m, n, k, af.data(), bf.data(), cf.data(), false);
  if (accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] += static_cast<double>(cf[i]);
  } else {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<double>(cf[i]);
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw;
  int stride, padding;
  std::size_t out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const auto H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ky);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kx);
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const auto H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ky);
          if (iy < 0 || iy >= H) continue;
          double* dst = plane + iy * W;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kx);
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw UsageError("operation on an unbound Var");
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
  return a.tape();
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return a.tape();
}

// ---- broadcasting ----

enum class Bcast { full, scalar, channel };

struct BinaryLayout {
  Shape out;
  Bcast ma, mb;
  std::size_t plane = 1;  // H*W for channel broadcast
};

bool is_channel_vector_of(const Shape& vec, const Shape& map) {
  return vec.size() == 1 && map.size() == 3 && vec[0] == map[0];
}

BinaryLayout layout_for(const Shape& a, const Shape& b, const char* op) {
  BinaryLayout l;
  if (a == b) {
    l.out = a;
    l.ma = l.mb = Bcast::full;
  } else if (numel(b) == 1) {
    l.out = a;
    l.ma = Bcast::full;
    l.mb = Bcast::scalar;
  } else if (numel(a) == 1) {
    l.out = b;
    l.ma = Bcast::scalar;
    l.mb = Bcast::full;
  } else if (is_channel_vector_of(b, a)) {
    l.out = a;
    l.ma = Bcast::full;
    l.mb = Bcast::channel;
    l.plane = a[1] * a[2];
  } else if (is_channel_vector_of(a, b)) {
    l.out = b;
    l.ma = Bcast::channel;
    l.mb = Bcast::full;
    l.plane = b[1] * b[2];
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
  }
  return l;
}

inline std::size_t src_index(Bcast m, std::size_t i, std::size_t plane) {
  switch (m) {
    case Bcast::full:
      return i;
    case Bcast::scalar:
      return 0;
    case Bcast::channel:
      return i / plane;
  }
  return i;
}

// f(a, b) -> value; da(a, b) and db(a, b) are partial derivatives.
template <typename F, typename DA, typename DB>
Var binary(const char* op, Var a, Var b, F f, DA da, DB db) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryLayout l = layout_for(av.shape(), bv.shape(), op);
  Tensor out(l.out);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = f(av[src_index(l.ma, i, l.plane)], bv[src_index(l.mb, i, l.plane)]);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {ia, ib}, [ia, ib, l, da, db](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const std::size_t n = g.size();
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ja = src_index(l.ma, i, l.plane), jb = src_index(l.mb, i, l.plane);
        ga[ja] += g[i] * da(av[ja], bv[jb]);
      }
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ja = src_index(l.ma, i, l.plane), jb = src_index(l.mb, i, l.plane);
        gb[jb] += g[i] * db(av[ja], bv[jb]);
      }
    }
  });
}

// f(x) -> value; df(x, y) is the derivative given input x and output y.
template <typename F, typename DF>
Var unary(const char* op, Var a, F f, DF df) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  return tape.record(op, std::move(out), {ia}, [ia, df](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_rank3(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(op) + ": " + what + " must be C x H x W, got " + to_string(t.shape()));
}

}  // namespace

void set_compute_precision(Precision p) { g_precision.store(p); }
Precision compute_precision() { return g_precision.load(); }

// ---- Var / Tape ----

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() of an unbound Var");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Tensor& value, const void* owner, std::size_t index) {
  const auto key = std::make_pair(owner, index);
  if (auto it = parameters_.find(key); it != parameters_.end()) return Var(this, it->second);
  Node n;
  n.external = &value;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  parameters_.emplace(key, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, const std::vector<std::size_t>& inputs, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  Node n;
  n.owned = std::move(value);
  for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_.at(id).requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const { return nodes_.at(id).value(); }

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (!n.grad.empty()) return n.grad;
  return Tensor(n.value().shape(), 0.0);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value().shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw UsageError("backward: loss belongs to another tape");
  if (loss.value().size() != 1)
    throw UsageError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  grad_buffer(loss.id())[0] += 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
  for (const auto& n : nodes_)
    if (!n.grad.empty() && !n.grad.all_finite()) throw NumericError("non-finite gradient during backward pass");
}

// ---- elementwise ----

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var neg(Var a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw UsageError("clamp: lo must not exceed hi");
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var log(Var a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(Var a) {
  return unary("softplus", a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var abs(Var a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---- reductions and reshaping ----

Var sum(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const std::size_t ia = a.id();
  return tape.record("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const double g = t.grad_buffer(self)[0];
    for (double& v : t.grad_buffer(ia).values()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record("reshape", std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  Tape& tape = tape_of(parts.front());
  std::size_t channels = 0;
  const Shape& s0 = parts.front().shape();
  require_rank3(parts.front().value(), "concat_channels", "input");
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (&tape_of(p) != &tape) throw UsageError("concat_channels: inputs on different tapes");
    const Shape& s = p.shape();
    if (s.size() != 3 || s[1] != s0[1] || s[2] != s0[2])
      throw ShapeError("concat_channels: spatial extents differ: " + to_string(s0) + " vs " + to_string(s));
    channels += s[0];
    ids.push_back(p.id());
  }
  Tensor out(Shape{channels, s0[1], s0[2]});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + offset);
    offset += v.size();
  }
  return tape.record("concat_channels", std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    std::size_t offset = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Tensor& gi = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var upsample2x(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank3(av, "upsample2x", "input");
  const std::size_t C = av.dim(0), H = av.dim(1), W = av.dim(2);
  Tensor out(Shape{C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t x = 0; x < 2 * W; ++x) out.at(c, y, x) = av.at(c, y / 2, x / 2);
  const std::size_t ia = a.id();
  return tape.record("upsample2x", std::move(out), {ia}, [ia, C, H, W](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t x = 0; x < 2 * W; ++x) ga.at(c, y / 2, x / 2) += g.at(c, y, x);
  });
}

// ---- dense ----

Var dense(Var x, Var weight, Var bias) {
  Tape& tape = same_tape(x, weight);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 || wv.dim(1) != xv.dim(0) || bv.dim(0) != wv.dim(0))
    throw ShapeError("dense: weight " + to_string(wv.shape()) + ", input " + to_string(xv.shape()) + ", bias " +
                     to_string(bv.shape()));
  const std::size_t m = wv.dim(0), n = wv.dim(1);
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = bv[i];
    const double* row = wv.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * xv[j];
    out[i] = s;
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return tape.record("dense", std::move(out), {ix, iw, ib}, [ix, iw, ib, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(ix);
    const Tensor& wv = t.value(iw);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < m; ++i) {
        const double* row = wv.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) gx[j] += row[j] * g[i];
      }
    }
    if (t.requires_grad(iw)) {
      Tensor& gw = t.grad_buffer(iw);
      for (std::size_t i = 0; i < m; ++i) {
        double* row = gw.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += g[i] * xv[j];
      }
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
    }
  });
}

// ---- convolution ----

std::size_t conv_output_extent(std::size_t in, std::size_t k, int stride, int padding) {
  if (stride < 1) throw UsageError("convolution stride must be >= 1");
  if (padding < 0) throw UsageError("convolution padding must be >= 0");
  const std::size_t padded = in + 2 * static_cast<std::size_t>(padding);
  if (k > padded)
    throw ShapeError("kernel extent " + std::to_string(k) + " exceeds padded input " + std::to_string(padded));
  return (padded - k) / static_cast<std::size_t>(stride) + 1;
}

namespace {

void add_channel_bias(Tensor& out, const Tensor& bias) {
  const std::size_t C = out.dim(0), P = out.dim(1) * out.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    double* p = out.data() + c * P;
    for (std::size_t i = 0; i < P; ++i) p[i] += bias[c];
  }
}

void accumulate_bias_grad(const Tensor& g, Tensor& gb) {
  const std::size_t C = g.dim(0), P = g.dim(1) * g.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    const double* p = g.data() + c * P;
    double s = 0.0;
    for (std::size_t i = 0; i < P; ++i) s += p[i];
    gb[c] += s;
  }
}

void check_bias(const Tensor& bias, std::size_t channels, const char* op) {
  if (bias.rank() != 1 || bias.dim(0) != channels)
    throw ShapeError(std::string(op) + ": bias " + to_string(bias.shape()) + " does not match " +
                     std::to_string(channels) + " output channels");
}

Var conv2d_impl(Var input, Var kernel, const Var* bias, int stride, int padding) {
  Tape& tape = same_tape(input, kernel);
  if (bias) same_tape(input, *bias);
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  require_rank3(x, "conv2d", "input");
  if (k.rank() != 4) throw ShapeError("conv2d: kernel must be Cout x Cin x kh x kw, got " + to_string(k.shape()));
  if (k.dim(1) != x.dim(0))
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, input has " +
                     std::to_string(x.dim(0)));
  const std::size_t cout = k.dim(0);
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), k.dim(2), k.dim(3), stride, padding, 0, 0};
  g.out_h = conv_output_extent(g.height, g.kh, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kw, stride, padding);
  if (bias) check_bias(bias->value(), cout, "conv2d");

  auto col = std::make_shared<std::vector<double>>(g.rows() * g.cols());
  im2col(x.data(), g, col->data());
  Tensor out(Shape{cout, g.out_h, g.out_w});
  gemm(false, false, cout, g.cols(), g.rows(), k.data(), col->data(), out.data(), false);
  if (bias) add_channel_bias(out, bias->value());

  const std::size_t ix = input.id(), ik = kernel.id();
  const std::size_t ib = bias ? bias->id() : ix;
  const bool has_bias = bias != nullptr;
  std::vector<std::size_t> inputs{ix, ik};
  if (has_bias) inputs.push_back(ib);
  return tape.record("conv2d", std::move(out), inputs,
                     [ix, ik, ib, has_bias, g, cout, col](Tape& t, std::size_t self) {
                       const Tensor& go = t.grad_buffer(self);
                       if (t.requires_grad(ik)) {
                         Tensor& gk = t.grad_buffer(ik);
                         gemm(false, true, cout, g.rows(), g.cols(), go.data(), col->data(), gk.data(), true);
                       }
                       if (t.requires_grad(ix)) {
                         std::vector<double> gcol(g.rows() * g.cols());
                         gemm(true, false, g.rows(), g.cols(), cout, t.value(ik).data(), go.data(), gcol.data(),
                              false);
                         col2im_add(gcol.data(), g, t.grad_buffer(ix).data());
                       }
                       if (has_bias && t.requires_grad(ib)) accumulate_bias_grad(go, t.grad_buffer(ib));
                     });
}

Var conv_transpose2d_impl(Var input, Var kernel, const Var* bias, int stride, int padding) {
  Tape& tape = same_tape(input, kernel);
  if (bias) same_tape(input, *bias);
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  require_rank3(x, "conv_transpose2d", "input");
  if (k.rank() != 4)
    throw ShapeError("conv_transpose2d: kernel must be Cin x Cout x kh x kw, got " + to_string(k.shape()));
  if (k.dim(0) != x.dim(0))
    throw ShapeError("conv_transpose2d: kernel expects " + std::to_string(k.dim(0)) + " input channels, input has " +
                     std::to_string(x.dim(0)));
  if (stride < 1 || padding < 0) throw UsageError("conv_transpose2d: invalid stride or padding");
  const std::size_t cin = x.dim(0), cout = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const long oh = (static_cast<long>(x.dim(1)) - 1) * stride - 2L * padding + static_cast<long>(kh);
  const long ow = (static_cast<long>(x.dim(2)) - 1) * stride - 2L * padding + static_cast<long>(kw);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  // Geometry of the adjoint convolution: output image plays the input role.
  ConvGeometry g{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw, stride, padding,
                 x.dim(1), x.dim(2)};
  if (bias) check_bias(bias->value(), cout, "conv_transpose2d");

  std::vector<double> col(g.rows() * g.cols());
  gemm(true, false, g.rows(), g.cols(), cin, k.data(), x.data(), col.data(), false);
  Tensor out(Shape{cout, g.height, g.width});
  col2im_add(col.data(), g, out.data());
  if (bias) add_channel_bias(out, bias->value());

  const std::size_t ix = input.id(), ik = kernel.id();
  const std::size_t ib = bias ? bias->id() : ix;
  const bool has_bias = bias != nullptr;
  std::vector<std::size_t> inputs{ix, ik};
  if (has_bias) inputs.push_back(ib);
  return tape.record("conv_transpose2d", std::move(out), inputs,
                     [ix, ik, ib, has_bias, g, cin](Tape& t, std::size_t self) {
                       const Tensor& go = t.grad_buffer(self);
                       std::vector<double> gcol(g.rows() * g.cols());
                       im2col(go.data(), g, gcol.data());
                       if (t.requires_grad(ix)) {
                         gemm(false, false, cin, g.cols(), g.rows(), t.value(ik).data(), gcol.data(),
                              t.grad_buffer(ix).data(), true);
                       }
                       if (t.requires_grad(ik)) {
                         gemm(false, true, cin, g.rows(), g.cols(), t.value(ix).data(), gcol.data(),
                              t.grad_buffer(ik).data(), true);
                       }
                       if (has_bias && t.requires_grad(ib)) accumulate_bias_grad(go, t.grad_buffer(ib));
                     });
}

}  // namespace

Var conv2d(Var input, Var kernel, int stride, int padding) {
  return conv2d_impl(input, kernel, nullptr, stride, padding);
}

Var conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
  return conv2d_impl(input, kernel, &bias, stride, padding);
}

Var conv_transpose2d(Var input, Var kernel, int stride, int padding) {
  return conv_transpose2d_impl(input, kernel, nullptr, stride, padding);
}

Var conv_transpose2d(Var input, Var kernel, Var bias, int stride, int padding) {
  return conv_transpose2d_impl(input, kernel, &bias, stride, padding);
}

}  // namespace sizefit::tensor
