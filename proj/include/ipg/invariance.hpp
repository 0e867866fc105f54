#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ipg/model.hpp"
#include "ipg/tensor.hpp"

namespace ipg {

using Rng = std::mt19937_64;

// Ordered pair: `first` carries one value of the spurious characteristic, `second` the other.
struct InvariancePair {
  Tensor first;   // [C,H,W]
  Tensor second;  // [C,H,W]
};

class InvariancePairSet {
 public:
  InvariancePairSet() = default;
  explicit InvariancePairSet(std::vector<InvariancePair> pairs);

  std::size_t size() const noexcept { return pairs_.size(); }
  bool empty() const noexcept { return pairs_.empty(); }
  const InvariancePair& operator[](std::size_t i) const { return pairs_.at(i); }
  const std::vector<InvariancePair>& pairs() const noexcept { return pairs_; }

 private:
  std::vector<InvariancePair> pairs_;
};

struct PairBatch {
  Tensor firsts;   // [B,C,H,W]
  Tensor seconds;  // [B,C,H,W]
  std::size_t size() const { return firsts.dim(0); }
};

PairBatch make_pair_batch(Tensor firsts, Tensor seconds);

// B pairs drawn uniformly with replacement.
PairBatch sample_pair_batch(const InvariancePairSet& pairs, std::size_t batch_size, Rng& rng);

// Entrywise mean of the per-input rationale matrices over a batch, [D,K].
Tensor mean_rationale(const Network& net, const Tensor& batch);

struct SpectralResult {
  double sigma = 0.0;
  std::vector<double> left;   // u, length rows
  std::vector<double> right;  // v, length cols
  std::size_t iterations = 0;
};

struct PowerIterationOptions {
  double tolerance = 1e-12;
  std::size_t max_iterations = 1000;
  std::uint64_t restart_seed = 0x5eed;
};

// Largest singular value of a row-major rows x cols matrix by power iteration
// on A^T A, started from the normalized all-ones vector.
SpectralResult top_singular(std::span<const double> matrix, std::size_t rows, std::size_t cols,
                            const PowerIterationOptions& options = {});

// sigma_max(first - second).
double rationale_distance(const Tensor& first, const Tensor& second);

struct CorrectiveGradient {
  double distance = 0.0;
  bool degenerate = false;
  // Flat over ModelParams::tensors() order.
  std::vector<double> gradient;
  // Softmax outputs of both sides at the parameters used for the gradient.
  Tensor probs_first;
  Tensor probs_second;
};

// Distance and its gradient w.r.t. all parameters, through u^T (R1 - R2) v with
// the top singular pair held fixed.
CorrectiveGradient corrective_gradient(const Network& net, const PairBatch& batch);

inline constexpr double kProbabilityFloor = 1e-12;

// Mean over rows of the symmetrized KL divergence between two [B,K] probability tables.
double invariance_condition(const Tensor& probs_first, const Tensor& probs_second);
double invariance_condition(const Network& net, const PairBatch& batch);

}  // namespace ipg
