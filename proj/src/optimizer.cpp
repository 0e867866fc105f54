#include "ipg/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "ipg/error.hpp"

namespace ipg {

void IPGConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorKind::invalid_argument, "ipg config: alpha must lie in [0,1]");
  if (!(threshold >= 0.0)) fail(ErrorKind::invalid_argument, "ipg config: threshold t must be >= 0");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail(ErrorKind::invalid_argument, "ipg config: epsilon must be > 0");
  if (!(eta > 0.0) || !std::isfinite(eta)) fail(ErrorKind::invalid_argument, "ipg config: eta must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::invalid_argument, "ipg config: momentum must lie in [0,1)");
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

FlatVector rescale_to(std::span<const double> g1, double target_norm, double epsilon) {
  const double n1 = l2_norm(g1);
  if (n1 == 0.0) fail(ErrorKind::invalid_argument, "rescale: cannot rescale a zero vector");
  const double factor = std::max(epsilon, target_norm) / n1;
  FlatVector out(g1.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g1[i] * factor;
  return out;
}

FlatVector rescale(std::span<const double> g1, std::span<const double> g2, double epsilon) {
  if (g1.size() != g2.size()) {
    fail(ErrorKind::invalid_argument, "rescale: length mismatch " + std::to_string(g1.size()) + " vs " +
                                          std::to_string(g2.size()));
  }
  return rescale_to(g1, l2_norm(g2), epsilon);
}

ShapedGradient shape_loss_gradient(std::span<const double> loss_grad, std::span<const double> corrective,
                                   double condition, const IPGConfig& cfg) {
  if (loss_grad.size() != corrective.size()) {
    fail(ErrorKind::invalid_argument, "shape_loss_gradient: gradient layouts differ (" +
                                          std::to_string(loss_grad.size()) + " vs " +
                                          std::to_string(corrective.size()) + ")");
  }
  FlatVector g(loss_grad.begin(), loss_grad.end());
  const double loss_norm = l2_norm(loss_grad);
  if (loss_norm == 0.0) return {std::move(g), ShapeBranch::zero_input};

  const double reference = std::max(cfg.epsilon, l2_norm(corrective));
  if (condition > cfg.threshold) {
    FlatVector out = rescale_to(loss_grad, reference, cfg.epsilon);
    for (double& x : out) x *= cfg.alpha;
    return {std::move(out), ShapeBranch::violated};
  }
  const double cap = 2.0 * reference;
  if (loss_norm <= cap) return {std::move(g), ShapeBranch::unchanged};
  return {rescale_to(loss_grad, cap, cfg.epsilon), ShapeBranch::capped};
}

OptState OptState::zeros_like(const ModelParams& params) {
  OptState state;
  for (const auto& t : params.tensors()) {
    state.velocity.emplace_back(t.size(), 0.0);
    state.loss_velocity.emplace_back(t.size(), 0.0);
  }
  return state;
}

void sigma_update(ModelParams& params, std::vector<std::vector<double>>& velocity, std::span<const double> gradient,
                  double eta, double momentum) {
  if (gradient.size() != params.total_size()) {
    fail(ErrorKind::invalid_argument, "sigma_update: gradient has " + std::to_string(gradient.size()) +
                                          " entries, parameters " + std::to_string(params.total_size()));
  }
  if (!std::all_of(gradient.begin(), gradient.end(), [](double g) { return std::isfinite(g); })) {
    fail(ErrorKind::numeric, "sigma_update: non-finite gradient, step aborted");
  }
  std::vector<Tensor> current = params.tensors();
  if (velocity.size() != current.size()) fail(ErrorKind::invalid_argument, "sigma_update: velocity layout mismatch");

  std::vector<Tensor> next;
  next.reserve(current.size());
  std::size_t offset = 0;
  for (std::size_t p = 0; p < current.size(); ++p) {
    const auto& t = current[p];
    auto& v = velocity[p];
    if (v.size() != t.size()) fail(ErrorKind::invalid_argument, "sigma_update: velocity shape mismatch");
    std::vector<double> values(t.data().begin(), t.data().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = momentum * v[i] + gradient[offset + i];
      values[i] -= eta * v[i];
    }
    offset += t.size();
    next.emplace_back(t.shape(), std::move(values), true);
  }
  params.assign(std::move(next));
}

std::pair<double, FlatVector> loss_and_gradient(const Network& net, const Tensor& x, const std::vector<int>& labels) {
  const std::vector<Tensor> params = net.params().tensors();
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor loss = cross_entropy(net.logits(net.features(x)), labels);
  const Gradients grads = backward(loss, tape);
  FlatVector flat;
  flat.reserve(net.params().total_size());
  for (const auto& p : params) {
    const auto g = grads.of(p);
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return {loss.item(), std::move(flat)};
}

StepStats ipg_step(Network& net, OptState& state, const Tensor& x, const std::vector<int>& labels,
                   const PairBatch& pairs, const IPGConfig& cfg) {
  if (cfg.mode == TrainMode::erm) fail(ErrorKind::invalid_argument, "ipg_step: mode must be ipg or ipg_aa");
  StepStats stats;

  const CorrectiveGradient corrective = corrective_gradient(net, pairs);
  stats.distance = corrective.distance;
  stats.degenerate = corrective.degenerate;
  stats.corrective_norm = l2_norm(corrective.gradient);
  if (!corrective.degenerate) sigma_update(net.params(), state.velocity, corrective.gradient, cfg.eta, cfg.momentum);

  auto [loss, loss_grad] = loss_and_gradient(net, x, labels);
  stats.loss = loss;
  stats.loss_grad_norm = l2_norm(loss_grad);

  stats.condition = invariance_condition(corrective.probs_first, corrective.probs_second);
  const ShapedGradient shaped = shape_loss_gradient(loss_grad, corrective.gradient, stats.condition, cfg);
  stats.violated = stats.condition > cfg.threshold;
  stats.shaped_norm = l2_norm(shaped.gradient);

  auto& velocity = cfg.separate_momentum ? state.loss_velocity : state.velocity;
  sigma_update(net.params(), velocity, shaped.gradient, cfg.eta, cfg.momentum);
  return stats;
}

double erm_step(Network& net, OptState& state, const Tensor& x, const std::vector<int>& labels, double eta,
                double momentum) {
  auto [loss, grad] = loss_and_gradient(net, x, labels);
  sigma_update(net.params(), state.velocity, grad, eta, momentum);
  return loss;
}

}  // namespace ipg
