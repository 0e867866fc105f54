#include "ipg/model.hpp"

#include <cmath>
#include <random>

#include "ipg/error.hpp"

namespace ipg {

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t rows = x.dim(0);
  const Tensor ones = Tensor::filled({rows, 1}, 1.0);
  return add(matmul(x, weight), matmul(ones, reshape(bias, {1, bias.size()})));
}

std::size_t pooled(std::size_t extent, std::size_t times) {
  for (std::size_t i = 0; i < times; ++i) extent /= 2;
  return extent;
}

}  // namespace

std::size_t ArchitectureConfig::feature_dim() const {
  if (kind == ArchKind::mlp) return hidden.empty() ? 0 : hidden.back();
  return cnn_feature_dim;
}

void ArchitectureConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) fail(ErrorKind::invalid_argument, "architecture: empty input shape");
  if (classes < 2) fail(ErrorKind::invalid_argument, "architecture: need at least 2 classes");
  if (kind == ArchKind::mlp) {
    if (hidden.empty()) fail(ErrorKind::invalid_argument, "architecture: mlp needs at least one hidden layer");
    for (auto h : hidden)
      if (h == 0) fail(ErrorKind::invalid_argument, "architecture: zero hidden width");
  } else {
    if (conv_channels.empty()) fail(ErrorKind::invalid_argument, "architecture: cnn needs conv channels");
    for (auto c : conv_channels)
      if (c == 0) fail(ErrorKind::invalid_argument, "architecture: zero conv channels");
    if (pooled(height, conv_channels.size()) == 0 || pooled(width, conv_channels.size()) == 0) {
      fail(ErrorKind::invalid_argument, "architecture: input too small for the pooling stack");
    }
    if (cnn_feature_dim == 0) fail(ErrorKind::invalid_argument, "architecture: zero feature dimension");
  }
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  out.reserve(count());
  for (const auto& p : feature) out.push_back(p.value);
  out.push_back(classifier);
  return out;
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  for (const auto& p : feature) out.push_back(p.name);
  out.emplace_back("classifier");
  return out;
}

std::size_t ModelParams::total_size() const {
  std::size_t n = classifier.size();
  for (const auto& p : feature) n += p.value.size();
  return n;
}

void ModelParams::assign(std::vector<Tensor> tensors) {
  if (tensors.size() != count()) fail(ErrorKind::invalid_argument, "params: tensor count mismatch");
  for (std::size_t i = 0; i < feature.size(); ++i) {
    if (tensors[i].shape() != feature[i].value.shape()) {
      fail(ErrorKind::invalid_argument, "params: shape mismatch for " + feature[i].name);
    }
    feature[i].value = std::move(tensors[i]);
  }
  if (tensors.back().shape() != classifier.shape()) fail(ErrorKind::invalid_argument, "params: classifier shape mismatch");
  classifier = std::move(tensors.back());
}

Network::Network(ArchitectureConfig arch, ModelParams params) : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  const Shape expected{arch_.feature_dim(), arch_.classes};
  if (!params_.classifier.defined() || params_.classifier.shape() != expected) {
    fail(ErrorKind::invalid_argument, "network: classifier must be " + shape_string(expected));
  }
}

Network Network::initialize(const ArchitectureConfig& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  ModelParams params;
  std::size_t width = 0;
  if (arch.kind == ArchKind::mlp) {
    width = arch.input_size();
    for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
      const std::size_t next = arch.hidden[i];
      params.feature.push_back({"dense" + std::to_string(i) + ".weight", glorot({width, next}, width, next, rng)});
      params.feature.push_back({"dense" + std::to_string(i) + ".bias", Tensor::zeros({next}, true)});
      width = next;
    }
  } else {
    std::size_t in_ch = arch.channels;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
      const std::size_t out_ch = arch.conv_channels[i];
      params.feature.push_back(
          {"conv" + std::to_string(i) + ".weight", glorot({out_ch, in_ch, 3, 3}, in_ch * 9, out_ch * 9, rng)});
      params.feature.push_back({"conv" + std::to_string(i) + ".bias", Tensor::zeros({out_ch}, true)});
      in_ch = out_ch;
    }
    const std::size_t flat = in_ch * pooled(arch.height, arch.conv_channels.size()) *
                             pooled(arch.width, arch.conv_channels.size());
    params.feature.push_back({"dense0.weight", glorot({flat, arch.cnn_feature_dim}, flat, arch.cnn_feature_dim, rng)});
    params.feature.push_back({"dense0.bias", Tensor::zeros({arch.cnn_feature_dim}, true)});
    width = arch.cnn_feature_dim;
  }
  params.classifier = glorot({width, arch.classes}, width, arch.classes, rng);
  return Network(arch, std::move(params));
}

Tensor Network::features(const Tensor& x) const {
  const Shape expected{arch_.channels, arch_.height, arch_.width};
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != expected) {
    fail(ErrorKind::invalid_argument,
         "features: expected [N," + shape_string(expected).substr(1) + ", got " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  const auto& f = params_.feature;
  if (arch_.kind == ArchKind::mlp) {
    Tensor h = reshape(x, {n, arch_.input_size()});
    for (std::size_t i = 0; i + 1 < f.size(); i += 2) h = relu(dense(h, f[i].value, f[i + 1].value));
    return h;
  }
  Tensor h = x;
  const std::size_t convs = arch_.conv_channels.size();
  for (std::size_t i = 0; i < convs; ++i) h = maxpool2(relu(conv2d(h, f[2 * i].value, f[2 * i + 1].value, 1)));
  h = reshape(h, {n, h.size() / n});
  return relu(dense(h, f[2 * convs].value, f[2 * convs + 1].value));
}

Tensor Network::logits(const Tensor& z) const { return ipg::logits(z, params_.classifier); }

Tensor Network::predict(const Tensor& x) const { return softmax(logits(features(x))); }

Tensor Network::rationale(const Tensor& x) const {
  Tensor batch = x;
  if (x.rank() == 3) batch = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    fail(ErrorKind::invalid_argument, "rationale: expects a single input, got " + shape_string(x.shape()));
  }
  return rationale_from_features(features(batch), params_.classifier);
}

Tensor logits(const Tensor& z, const Tensor& classifier) {
  if (z.rank() != 2 || classifier.rank() != 2 || z.dim(1) != classifier.dim(0)) {
    fail(ErrorKind::invalid_argument,
         "logits: feature width mismatch " + shape_string(z.shape()) + " vs " + shape_string(classifier.shape()));
  }
  return matmul(z, classifier);
}

Tensor rationale_from_features(const Tensor& features, const Tensor& classifier) {
  const std::size_t d = classifier.dim(0), k = classifier.dim(1);
  if (features.size() != d) {
    fail(ErrorKind::invalid_argument,
         "rationale: feature size " + shape_string(features.shape()) + " vs classifier " + shape_string(classifier.shape()));
  }
  const Tensor column = reshape(features, {d, 1});
  return multiply(matmul(column, Tensor::filled({1, k}, 1.0)), classifier);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    fail(ErrorKind::invalid_argument, "cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                                          shape_string(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> onehot(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      fail(ErrorKind::invalid_argument, "cross_entropy: label out of range");
    }
    onehot[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  const Tensor picked = multiply(Tensor({n, k}, std::move(onehot)), log(softmax(logits)));
  return scale(sum_all(picked), -1.0 / static_cast<double>(n));
}

}  // namespace ipg
