#include "ipg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ipg/error.hpp"

namespace ipg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<const RowMatrix>;
using MatrixRef = Eigen::Map<RowMatrix>;

thread_local Tape* active_tape = nullptr;

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
  fail(ErrorKind::invalid_argument,
       std::string(op_name(kind)) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Builds the output tensor and, when anything upstream needs a gradient and a
// tape is recording, the node that routes gradients back.
Tensor emit(OpKind kind, std::vector<Tensor> inputs, Shape shape, std::vector<double> values, BackwardFn fn) {
  if (!all_finite(values)) {
    fail(ErrorKind::numeric, std::string(op_name(kind)) + ": produced non-finite values");
  }
  Tape* tape = Tape::active();
  const bool track =
      tape != nullptr && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  Tensor out(std::move(shape), std::move(values), track);
  if (track) tape->record({kind, std::move(inputs), out, std::move(fn)});
  return out;
}

MatrixView as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return MatrixView(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  mutable std::vector<double> grad;
  mutable bool has_grad = false;
};

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  if (std::any_of(shape.begin(), shape.end(), [](std::size_t e) { return e == 0; })) {
    fail(ErrorKind::invalid_argument, "tensor: zero extent in shape " + shape_string(shape));
  }
  if (shape_size(shape) != data.size()) {
    fail(ErrorKind::invalid_argument, "tensor: shape " + shape_string(shape) + " holds " +
                                          std::to_string(shape_size(shape)) + " values, got " +
                                          std::to_string(data.size()));
  }
  if (!all_finite(data)) fail(ErrorKind::numeric, "tensor: non-finite input value");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) fail(ErrorKind::invalid_argument, "tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) fail(ErrorKind::invalid_argument, "tensor: axis out of range for " + shape_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::size() const { return data().size(); }

std::span<const double> Tensor::data() const {
  if (!impl_) fail(ErrorKind::invalid_argument, "tensor: use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::invalid_argument, "tensor: item() on shape " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) fail(ErrorKind::invalid_argument, "tensor: no gradient stored");
  return impl_->grad;
}

void Tensor::set_grad(std::vector<double> grad) const {
  if (grad.size() != size()) fail(ErrorKind::invalid_argument, "tensor: gradient size mismatch");
  impl_->grad = std::move(grad);
  impl_->has_grad = true;
}

void Tensor::clear_grad() const {
  if (!impl_) return;
  impl_->grad.clear();
  impl_->has_grad = false;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::scale: return "scale";
    case OpKind::multiply: return "multiply";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::maxpool2: return "maxpool2";
  }
  return "unknown";
}

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

Tape* Tape::active() noexcept { return active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }
Tape::Scope::~Scope() { active_tape = previous_; }

std::vector<double> Gradients::of(const Tensor& tensor) const {
  auto it = grads_.find(tensor.id());
  if (it == grads_.end()) return std::vector<double>(tensor.size(), 0.0);
  return it->second;
}

Gradients backward(const Tensor& root, const Tape& tape) {
  if (!root.defined() || root.size() != 1) {
    fail(ErrorKind::invalid_argument, "backward: root must be a scalar, got " +
                                          (root.defined() ? shape_string(root.shape()) : std::string("undefined")));
  }
  const auto& nodes = tape.nodes();
  std::size_t root_index = nodes.size();
  std::unordered_map<const void*, std::size_t> producer;
  producer.reserve(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    producer[nodes[i].output.id()] = i;
    if (nodes[i].output.id() == root.id()) root_index = i;
  }
  if (root_index == nodes.size()) fail(ErrorKind::invalid_argument, "backward: root was not recorded on this tape");

  std::unordered_map<const void*, std::vector<double>> buffers;
  buffers[root.id()] = {1.0};
  std::vector<const Tensor*> leaves;

  for (std::size_t i = root_index + 1; i-- > 0;) {
    const auto& node = nodes[i];
    auto out_it = buffers.find(node.output.id());
    if (out_it == buffers.end()) continue;
    const std::vector<double> grad_out = std::move(out_it->second);
    buffers.erase(out_it);

    std::vector<std::vector<double>*> grad_in(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const Tensor& input = node.inputs[k];
      if (!input.requires_grad()) continue;
      auto [it, inserted] = buffers.try_emplace(input.id());
      if (inserted) {
        it->second.assign(input.size(), 0.0);
        if (producer.find(input.id()) == producer.end()) leaves.push_back(&input);
      }
      grad_in[k] = &it->second;
    }
    node.backward(grad_out, grad_in);
  }

  Gradients result;
  for (const Tensor* leaf : leaves) {
    auto& g = buffers.at(leaf->id());
    if (!all_finite(g)) fail(ErrorKind::numeric, "backward: non-finite gradient");
    leaf->set_grad(g);
    result.grads_[leaf->id()] = std::move(g);
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error(OpKind::matmul, a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MatrixRef(out.data(), m, n).noalias() = as_matrix(a, m, k) * as_matrix(b, k, n);
  return emit(OpKind::matmul, {a, b}, {m, n}, std::move(out),
              [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gin) {
                MatrixView go(g.data(), m, n);
                if (gin[0]) MatrixRef(gin[0]->data(), m, k).noalias() += go * as_matrix(b, k, n).transpose();
                if (gin[1]) MatrixRef(gin[1]->data(), k, n).noalias() += as_matrix(a, m, k).transpose() * go;
              });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
};

// cols: [C*kh*kw, oh*ow] for image `img`.
void im2col(const double* x, const ConvGeometry& g, std::vector<double>& cols) {
  cols.assign(g.patch() * g.oh * g.ow, 0.0);
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols.data() + ((ch * g.kh + ky) * g.kw + kx) * g.oh * g.ow;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t xx = 0; xx < g.ow; ++xx) {
            const long ix = static_cast<long>(xx + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            row[y * g.ow + xx] = x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& cols, const ConvGeometry& g, double* dx) {
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols.data() + ((ch * g.kh + ky) * g.kw + kx) * g.oh * g.ow;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t xx = 0; xx < g.ow; ++xx) {
            const long ix = static_cast<long>(xx + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[y * g.ow + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    shape_error(OpKind::conv2d, x.shape(), weight.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) shape_error(OpKind::conv2d, weight.shape(), bias.shape());
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) shape_error(OpKind::conv2d, x.shape(), weight.shape());
  g.oh = g.h + 2 * padding - g.kh + 1;
  g.ow = g.w + 2 * padding - g.kw + 1;

  const std::size_t spatial = g.oh * g.ow;
  std::vector<double> out(g.n * g.o * spatial);
  std::vector<double> cols;
  const MatrixView kernel = as_matrix(weight, g.o, g.patch());
  for (std::size_t img = 0; img < g.n; ++img) {
    im2col(x.data().data() + img * g.c * g.h * g.w, g, cols);
    MatrixRef dst(out.data() + img * g.o * spatial, g.o, spatial);
    dst.noalias() = kernel * MatrixView(cols.data(), g.patch(), spatial);
    for (std::size_t oc = 0; oc < g.o; ++oc) dst.row(oc).array() += bias[oc];
  }
  return emit(OpKind::conv2d, {x, weight, bias}, {g.n, g.o, g.oh, g.ow}, std::move(out),
              [x, weight, g](std::span<const double> grad, std::span<std::vector<double>*> gin) {
                const std::size_t spatial = g.oh * g.ow;
                const MatrixView kernel = as_matrix(weight, g.o, g.patch());
                std::vector<double> cols;
                std::vector<double> dcols(g.patch() * spatial);
                for (std::size_t img = 0; img < g.n; ++img) {
                  MatrixView go(grad.data() + img * g.o * spatial, g.o, spatial);
                  if (gin[1]) {
                    im2col(x.data().data() + img * g.c * g.h * g.w, g, cols);
                    MatrixRef(gin[1]->data(), g.o, g.patch()).noalias() +=
                        go * MatrixView(cols.data(), g.patch(), spatial).transpose();
                  }
                  if (gin[2]) {
                    for (std::size_t oc = 0; oc < g.o; ++oc) (*gin[2])[oc] += go.row(oc).sum();
                  }
                  if (gin[0]) {
                    MatrixRef(dcols.data(), g.patch(), spatial).noalias() = kernel.transpose() * go;
                    col2im(dcols, g, gin[0]->data() + img * g.c * g.h * g.w);
                  }
                }
              });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return emit(OpKind::relu, {a}, a.shape(), std::move(out),
              [a](std::span<const double> g, std::span<std::vector<double>*> gin) {
                auto src = a.data();
                auto& dst = *gin[0];
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i] > 0.0 ? g[i] : 0.0;
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::add, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return emit(OpKind::add, {a, b}, a.shape(), std::move(out),
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                for (auto* dst : gin) {
                  if (!dst) continue;
                  for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
                }
              });
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::subtract, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return emit(OpKind::subtract, {a, b}, a.shape(), std::move(out),
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (gin[0])
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                if (gin[1])
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
              });
}

Tensor scale(const Tensor& a, double factor) {
  if (!std::isfinite(factor)) fail(ErrorKind::numeric, "scale: non-finite factor");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return emit(OpKind::scale, {a}, a.shape(), std::move(out),
              [factor](std::span<const double> g, std::span<std::vector<double>*> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
              });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::multiply, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return emit(OpKind::multiply, {a, b}, a.shape(), std::move(out),
              [a, b](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (gin[0])
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * b[i];
                if (gin[1])
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * a[i];
              });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    fail(ErrorKind::invalid_argument,
         "mean: axis " + std::to_string(axis) + " out of range for " + shape_string(a.shape()));
  }
  const Shape& s = a.shape();
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t extent = s[axis];
  const std::size_t inner = shape_size(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));

  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += a[(o * extent + e) * inner + i];
  const double inv = 1.0 / static_cast<double>(extent);
  for (double& v : out) v *= inv;

  return emit(OpKind::mean, {a}, std::move(out_shape), std::move(out),
              [outer, extent, inner, inv](std::span<const double> g, std::span<std::vector<double>*> gin) {
                auto& dst = *gin[0];
                for (std::size_t o = 0; o < outer; ++o)
                  for (std::size_t e = 0; e < extent; ++e)
                    for (std::size_t i = 0; i < inner; ++i) dst[(o * extent + e) * inner + i] += g[o * inner + i] * inv;
              });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) shape_error(OpKind::reshape, a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return emit(OpKind::reshape, {a}, std::move(shape), std::move(out),
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
              });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) fail(ErrorKind::invalid_argument, "softmax: needs at least one axis");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.size() / width;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = a.data().data() + r * width;
    double* dst = out.data() + r * width;
    const double peak = *std::max_element(src, src + width);
    double total = 0.0;
    for (std::size_t k = 0; k < width; ++k) total += dst[k] = std::exp(src[k] - peak);
    for (std::size_t k = 0; k < width; ++k) dst[k] /= total;
  }
  std::vector<double> saved = out;
  return emit(OpKind::softmax, {a}, a.shape(), std::move(out),
              [y = std::move(saved), rows, width](std::span<const double> g, std::span<std::vector<double>*> gin) {
                auto& dst = *gin[0];
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t k = 0; k < width; ++k) dot += g[r * width + k] * y[r * width + k];
                  for (std::size_t k = 0; k < width; ++k) dst[r * width + k] += y[r * width + k] * (g[r * width + k] - dot);
                }
              });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
  return emit(OpKind::log, {a}, a.shape(), std::move(out),
              [a](std::span<const double> g, std::span<std::vector<double>*> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / a[i];
              });
}

Tensor maxpool2(const Tensor& a) {
  if (a.rank() != 4 || a.dim(2) < 2 || a.dim(3) < 2) shape_error(OpKind::maxpool2, a.shape(), {2, 2});
  const std::size_t planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (p * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (p * h + 2 * y + dy) * w + 2 * x + dx;
            if (a[idx] > a[best]) best = idx;
          }
        const std::size_t o = (p * oh + y) * ow + x;
        out[o] = a[best];
        argmax[o] = best;
      }
    }
  }
  return emit(OpKind::maxpool2, {a}, {a.dim(0), a.dim(1), oh, ow}, std::move(out),
              [argmax = std::move(argmax)](std::span<const double> g, std::span<std::vector<double>*> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[argmax[i]] += g[i];
              });
}

Tensor sum_all(const Tensor& a) {
  const auto n = static_cast<double>(a.size());
  return scale(mean(reshape(a, {a.size()}), 0), n);
}

double fd_check(const ScalarFunction& f, const std::vector<Tensor>& params, double step) {
  if (!(step > 0.0)) fail(ErrorKind::invalid_argument, "fd_check: step must be positive");
  std::vector<Tensor> tracked;
  tracked.reserve(params.size());
  for (const auto& p : params) tracked.emplace_back(p.shape(), std::vector<double>(p.data().begin(), p.data().end()), true);

  Gradients grads;
  {
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor root = f(tracked);
    grads = backward(root, tape);
  }

  std::vector<Tensor> probe(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) probe[i] = params[i].detach();

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<double> analytic = grads.of(tracked[i]);
    std::vector<double> values(params[i].data().begin(), params[i].data().end());
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double original = values[j];
      values[j] = original + step;
      probe[i] = Tensor(params[i].shape(), values);
      const double up = f(probe).item();
      values[j] = original - step;
      probe[i] = Tensor(params[i].shape(), values);
      const double down = f(probe).item();
      values[j] = original;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(numeric)));
    }
    probe[i] = params[i].detach();
  }
  return worst;
}

}  // namespace ipg
