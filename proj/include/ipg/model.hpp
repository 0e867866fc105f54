#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipg/tensor.hpp"

namespace ipg {

enum class ArchKind { mlp, cnn };

struct ArchitectureConfig {
  ArchKind kind = ArchKind::mlp;
  std::size_t channels = 2;
  std::size_t height = 14;
  std::size_t width = 14;
  // MLP hidden widths; the last one is the feature dimension D.
  std::vector<std::size_t> hidden{256, 128};
  // CNN conv channels (3x3, pad 1, relu, maxpool each), then a dense layer of size feature_dim.
  std::vector<std::size_t> conv_channels{16, 32};
  std::size_t cnn_feature_dim = 128;
  std::size_t classes = 2;

  std::size_t input_size() const { return channels * height * width; }
  std::size_t feature_dim() const;
  void validate() const;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// theta_f (feature extractor) followed by theta_h = W with shape D x K.
struct ModelParams {
  std::vector<NamedTensor> feature;
  Tensor classifier;

  std::size_t count() const { return feature.size() + 1; }
  // All tensors in canonical order: feature tensors, then the classifier.
  std::vector<Tensor> tensors() const;
  std::vector<std::string> names() const;
  std::size_t total_size() const;
  // Rebuilds from tensors() order.
  void assign(std::vector<Tensor> tensors);
};

class Network {
 public:
  Network(ArchitectureConfig arch, ModelParams params);

  // Uniform Glorot initialization with zero biases.
  static Network initialize(const ArchitectureConfig& arch, std::uint64_t seed);

  const ArchitectureConfig& arch() const noexcept { return arch_; }
  const ModelParams& params() const noexcept { return params_; }
  ModelParams& params() noexcept { return params_; }

  // x: [N,C,H,W] -> z: [N,D]
  Tensor features(const Tensor& x) const;
  Tensor logits(const Tensor& z) const;
  Tensor predict(const Tensor& x) const;
  // x: [C,H,W] or [1,C,H,W] -> R: [D,K]
  Tensor rationale(const Tensor& x) const;

 private:
  ArchitectureConfig arch_;
  ModelParams params_;
};

// o = z W, per row.
Tensor logits(const Tensor& z, const Tensor& classifier);
// features: [D] or [1,D]; R[i][k] = W[i][k] * z[i].
Tensor rationale_from_features(const Tensor& features, const Tensor& classifier);
// Mean cross-entropy of softmax(logits) against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace ipg
