#pragma once

// Dense tensors and a tape-based reverse-mode autodiff engine.
//
// Layout is channel-major row-major: a C x H x W tensor stores element
// (c, y, x) at c*H*W + y*W + x. Values are stored as double; the GEMM
// kernels behind conv2d, conv_transpose2d and dense can be switched to
// single precision with set_compute_precision() for training throughput.

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sizefit::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // (c, y, x) access for rank-3 tensors.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// The single value of a one-element tensor.
  double item() const;
  bool all_finite() const;
  void fill(double v);
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class Precision { f64, f32 };

/// Process-wide arithmetic precision for the GEMM kernels. f64 by default.
void set_compute_precision(Precision p);
Precision compute_precision();

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while its
/// tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and replays their gradient rules
/// in reverse. Nodes only reference earlier nodes, so recording order is a
/// valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  /// Leaf that references externally owned storage (a model parameter).
  /// The referenced tensor must outlive the tape and stay unmodified until
  /// backward() returns. Repeated calls with the same (owner, index) return
  /// the same node.
  Var parameter(const Tensor& value, const void* owner, std::size_t index);

  /// Used by op implementations. inputs are node ids of the operands;
  /// the node requires grad when any input does. Throws NumericError when
  /// value contains a non-finite entry.
  Var record(const char* op, Tensor value, const std::vector<std::size_t>& inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulated at a node; an all-zero tensor if nothing reached it.
  Tensor grad(Var v) const;
  /// Mutable gradient buffer, allocated on first use.
  Tensor& grad_buffer(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node. loss must be
  /// a one-element tensor (UsageError otherwise). May be called once per
  /// recorded graph; gradients accumulate if called again.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  /// Visits (index, gradient) for every parameter bound from owner that
  /// received a gradient.
  template <typename F>
  void for_each_parameter_grad(const void* owner, F&& f) const {
    for (const auto& [key, id] : parameters_) {
      if (key.first != owner) continue;
      const auto& node = nodes_[id];
      if (!node.grad.empty()) f(key.second, node.grad);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  std::vector<Node> nodes_;
  std::map<std::pair<const void*, std::size_t>, std::size_t> parameters_;
};

// ---- Operations -----------------------------------------------------------
//
// Binary elementwise ops accept equal shapes, a one-element operand on
// either side, or a length-C vector against a C x H x W tensor on either
// side (channel broadcast). Anything else is a ShapeError.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var sigmoid(Var a);
Var tanh(Var a);
Var clamp(Var a, double lo, double hi);
Var log(Var a);
Var softplus(Var a);
Var abs(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);
Var concat_channels(const std::vector<Var>& parts);

/// Nearest-neighbour 2x upsampling of a C x H x W tensor.
Var upsample2x(Var a);

/// y = weight * x + bias with x[n], weight[m x n], bias[m].
Var dense(Var x, Var weight, Var bias);

/// Cross-correlation of input[Cin x H x W] with kernel[Cout x Cin x kh x kw].
Var conv2d(Var input, Var kernel, int stride, int padding);
Var conv2d(Var input, Var kernel, Var bias, int stride, int padding);

/// Adjoint of conv2d with the same geometry; kernel[Cin x Cout x kh x kw].
/// Output extent is (H - 1) * stride - 2 * padding + kh.
Var conv_transpose2d(Var input, Var kernel, int stride, int padding);
Var conv_transpose2d(Var input, Var kernel, Var bias, int stride, int padding);

/// Output extent of a convolution along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t k, int stride, int padding);

}  // namespace sizefit::tensor
