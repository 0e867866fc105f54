#pragma once

#include <span>
#include <vector>

#include "ipg/invariance.hpp"
#include "ipg/model.hpp"

namespace ipg {

enum class TrainMode { erm, ipg, ipg_aa };

struct IPGConfig {
  double alpha = 0.1;
  double threshold = 2e-6;  // t
  double epsilon = 1e-8;
  double eta = 1e-3;
  double momentum = 0.9;
  TrainMode mode = TrainMode::ipg;
  // Separate velocity buffers for the corrective and the loss update.
  bool separate_momentum = false;

  void validate() const;
};

using FlatVector = std::vector<double>;

double l2_norm(std::span<const double> v);

// (g1 / |g1|) * max(epsilon, |g2|).
FlatVector rescale(std::span<const double> g1, std::span<const double> g2, double epsilon);
FlatVector rescale_to(std::span<const double> g1, double target_norm, double epsilon);

enum class ShapeBranch {
  violated,     // c > t: alpha-fraction of the corrective length
  unchanged,    // c <= t and within the cap
  capped,       // c <= t and longer than twice the corrective length
  zero_input,   // zero loss gradient passed through
};

struct ShapedGradient {
  FlatVector gradient;
  ShapeBranch branch;
};

ShapedGradient shape_loss_gradient(std::span<const double> loss_grad, std::span<const double> corrective,
                                   double condition, const IPGConfig& cfg);

struct OptState {
  std::vector<std::vector<double>> velocity;
  // Only used with IPGConfig::separate_momentum.
  std::vector<std::vector<double>> loss_velocity;

  static OptState zeros_like(const ModelParams& params);
};

// v <- momentum * v + g; theta <- theta - eta * v.
void sigma_update(ModelParams& params, std::vector<std::vector<double>>& velocity, std::span<const double> gradient,
                  double eta, double momentum);

struct StepStats {
  double loss = 0.0;
  double distance = 0.0;
  double condition = 0.0;
  double corrective_norm = 0.0;
  double loss_grad_norm = 0.0;
  double shaped_norm = 0.0;
  bool violated = false;
  bool degenerate = false;
};

// Mean cross-entropy and its flat gradient at the current parameters.
std::pair<double, FlatVector> loss_and_gradient(const Network& net, const Tensor& x, const std::vector<int>& labels);

// One two-stage IPG update.
StepStats ipg_step(Network& net, OptState& state, const Tensor& x, const std::vector<int>& labels,
                   const PairBatch& pairs, const IPGConfig& cfg);

// Plain cross-entropy update; returns the batch loss.
double erm_step(Network& net, OptState& state, const Tensor& x, const std::vector<int>& labels, double eta,
                double momentum);

}  // namespace ipg
