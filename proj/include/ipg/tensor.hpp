#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle to immutable storage; only the gradient
// slot is mutable. Operations record onto the Tape installed by Tape::Scope
// for the current thread whenever at least one input requires a gradient.
// Without an active tape the same calls just evaluate.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ipg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::span<const double> data() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }
  // Value of a one-element tensor.
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void set_grad(std::vector<double> grad) const;
  void clear_grad() const;

  // Same storage values, fresh identity, no gradient tracking.
  Tensor detach() const;
  const void* id() const noexcept { return impl_.get(); }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

enum class OpKind {
  matmul,
  conv2d,
  relu,
  add,
  subtract,
  scale,
  multiply,
  mean,
  reshape,
  softmax,
  log,
  maxpool2,
};

const char* op_name(OpKind kind);

// Receives the output gradient and one accumulation buffer per input
// (nullptr where the input does not require a gradient).
using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  void record(Node node);

  static Tape* active() noexcept;

  // Installs a tape as the recording target for this thread; restores the
  // previous one on destruction.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<Node> nodes_;
};

class Gradients {
 public:
  // d(root)/d(tensor); zeros of the right size if tensor did not participate.
  std::vector<double> of(const Tensor& tensor) const;
  bool contains(const Tensor& tensor) const { return grads_.count(tensor.id()) != 0; }

 private:
  friend Gradients backward(const Tensor& root, const Tape& tape);
  std::unordered_map<const void*, std::vector<double>> grads_;
};

// Reverse accumulation from a scalar root. Every participating leaf with
// requires_grad also gets its grad slot overwritten.
Gradients backward(const Tensor& root, const Tape& tape);

// Primitives. Shapes must match exactly; no broadcasting.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [N,C,H,W], weight: [O,C,kh,kw], bias: [O]; stride 1, symmetric zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding);
Tensor relu(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor multiply(const Tensor& a, const Tensor& b);
// Removes `axis`; reducing a rank-1 tensor yields a rank-0 scalar.
Tensor mean(const Tensor& a, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor softmax(const Tensor& a);
Tensor log(const Tensor& a);
// 2x2 window, stride 2, odd trailing rows/columns dropped. Input [N,C,H,W].
Tensor maxpool2(const Tensor& a);

// Sum of all entries as a scalar, composed from reshape/mean/scale.
Tensor sum_all(const Tensor& a);

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>&)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
double fd_check(const ScalarFunction& f, const std::vector<Tensor>& params, double step);

}  // namespace ipg
