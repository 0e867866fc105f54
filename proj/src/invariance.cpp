#include "ipg/invariance.hpp"

#include <algorithm>
#include <cmath>

#include "ipg/error.hpp"

namespace ipg {

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Tensor stack(const std::vector<const Tensor*>& items) {
  const Shape& item_shape = items.front()->shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  std::vector<double> values;
  values.reserve(shape_size(shape));
  for (const Tensor* t : items) values.insert(values.end(), t->data().begin(), t->data().end());
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

InvariancePairSet::InvariancePairSet(std::vector<InvariancePair> pairs) : pairs_(std::move(pairs)) {
  if (pairs_.empty()) fail(ErrorKind::invalid_argument, "pair set: must not be empty");
  const Shape& shape = pairs_.front().first.shape();
  for (const auto& p : pairs_) {
    if (p.first.shape() != shape || p.second.shape() != shape) {
      fail(ErrorKind::invalid_argument, "pair set: inhomogeneous pair shapes, expected " + shape_string(shape));
    }
  }
}

PairBatch make_pair_batch(Tensor firsts, Tensor seconds) {
  if (firsts.rank() != 4 || firsts.shape() != seconds.shape()) {
    fail(ErrorKind::invalid_argument,
         "pair batch: mismatched sides " + shape_string(firsts.shape()) + " vs " + shape_string(seconds.shape()));
  }
  return {std::move(firsts), std::move(seconds)};
}

PairBatch sample_pair_batch(const InvariancePairSet& pairs, std::size_t batch_size, Rng& rng) {
  if (pairs.empty()) fail(ErrorKind::invalid_argument, "sample_pair_batch: empty pair set");
  if (batch_size == 0) fail(ErrorKind::invalid_argument, "sample_pair_batch: batch size must be >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<const Tensor*> firsts, seconds;
  firsts.reserve(batch_size);
  seconds.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& p = pairs[pick(rng)];
    firsts.push_back(&p.first);
    seconds.push_back(&p.second);
  }
  return make_pair_batch(stack(firsts), stack(seconds));
}

Tensor mean_rationale(const Network& net, const Tensor& batch) {
  if (!batch.defined() || batch.rank() != 4) fail(ErrorKind::invalid_argument, "mean_rationale: empty batch");
  // Averaging R_x over the batch equals diag(mean z) W since R is linear in z.
  const Tensor z = net.features(batch);
  return rationale_from_features(mean(z, 0), net.params().classifier);
}

SpectralResult top_singular(std::span<const double> a, std::size_t rows, std::size_t cols,
                            const PowerIterationOptions& options) {
  if (a.size() != rows * cols || rows == 0 || cols == 0) {
    fail(ErrorKind::invalid_argument, "top_singular: matrix size mismatch");
  }
  std::vector<double> gram(cols * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < cols; ++i)
      for (std::size_t j = 0; j < cols; ++j) gram[i * cols + j] += a[r * cols + i] * a[r * cols + j];

  SpectralResult result;
  result.left.assign(rows, 0.0);
  result.right.assign(cols, 0.0);
  if (std::all_of(gram.begin(), gram.end(), [](double g) { return g == 0.0; })) return result;

  std::vector<double> v(cols, 1.0 / std::sqrt(static_cast<double>(cols)));
  std::vector<double> w(cols);
  Rng restart(options.restart_seed);
  std::normal_distribution<double> gauss;
  double sigma = 0.0;
  bool restarted = false;

  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    for (std::size_t i = 0; i < cols; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += gram[i * cols + j] * v[j];
      w[i] = s;
    }
    double rayleigh = 0.0;
    for (std::size_t i = 0; i < cols; ++i) rayleigh += v[i] * w[i];
    const double length = norm2(w);
    if (length == 0.0 || rayleigh == 0.0) {
      // Start vector orthogonal to the dominant subspace.
      if (restarted) break;
      restarted = true;
      for (double& x : v) x = gauss(restart);
      const double n = norm2(v);
      for (double& x : v) x /= n;
      continue;
    }
    double change = 0.0;
    for (std::size_t i = 0; i < cols; ++i) {
      const double next = w[i] / length;
      change = std::max(change, std::abs(next - v[i]));
      v[i] = next;
    }
    const double next_sigma = std::sqrt(std::max(rayleigh, 0.0));
    result.iterations = it + 1;
    const bool settled = std::abs(next_sigma - sigma) <= options.tolerance * next_sigma && change < 1e-9;
    sigma = next_sigma;
    if (settled) break;
  }

  // sigma = ||A v|| and u = A v / sigma for the final v.
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a[r * cols + j] * v[j];
    result.left[r] = s;
  }
  result.sigma = norm2(result.left);
  if (result.sigma > 0.0) {
    for (double& x : result.left) x /= result.sigma;
    result.right = v;
  }
  return result;
}

double rationale_distance(const Tensor& first, const Tensor& second) {
  if (first.shape() != second.shape() || first.rank() != 2) {
    fail(ErrorKind::invalid_argument,
         "rationale_distance: shape mismatch " + shape_string(first.shape()) + " vs " + shape_string(second.shape()));
  }
  std::vector<double> diff(first.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = first[i] - second[i];
  return top_singular(diff, first.dim(0), first.dim(1)).sigma;
}

CorrectiveGradient corrective_gradient(const Network& source, const PairBatch& batch) {
  // Track every parameter regardless of how the caller built the network.
  std::vector<Tensor> params = source.params().tensors();
  for (auto& p : params)
    if (!p.requires_grad()) p = Tensor(p.shape(), std::vector<double>(p.data().begin(), p.data().end()), true);
  ModelParams tracked = source.params();
  tracked.assign(params);
  const Network net(source.arch(), std::move(tracked));
  CorrectiveGradient out;
  Tape tape;
  Tape::Scope scope(tape);

  const Tensor z1 = net.features(batch.firsts);
  const Tensor z2 = net.features(batch.seconds);
  const Tensor& w = net.params().classifier;
  const Tensor diff = subtract(rationale_from_features(mean(z1, 0), w), rationale_from_features(mean(z2, 0), w));
  out.probs_first = softmax(net.logits(z1)).detach();
  out.probs_second = softmax(net.logits(z2)).detach();

  const std::size_t d = diff.dim(0), k = diff.dim(1);
  const SpectralResult top = top_singular(diff.data(), d, k);
  out.distance = top.sigma;
  if (top.sigma == 0.0) {
    out.degenerate = true;
    out.gradient.assign(net.params().total_size(), 0.0);
    return out;
  }

  const Tensor u({1, d}, top.left);
  const Tensor v({k, 1}, top.right);
  const Tensor bilinear = matmul(matmul(u, diff), v);
  const Gradients grads = backward(bilinear, tape);

  out.gradient.reserve(net.params().total_size());
  for (const auto& p : params) {
    const auto g = grads.of(p);
    out.gradient.insert(out.gradient.end(), g.begin(), g.end());
  }
  return out;
}

double invariance_condition(const Tensor& probs_first, const Tensor& probs_second) {
  if (probs_first.shape() != probs_second.shape() || probs_first.rank() != 2) {
    fail(ErrorKind::invalid_argument, "invariance_condition: shape mismatch " + shape_string(probs_first.shape()) +
                                          " vs " + shape_string(probs_second.shape()));
  }
  const std::size_t rows = probs_first.dim(0), k = probs_first.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double sym = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::max(probs_first[r * k + j], kProbabilityFloor);
      const double q = std::max(probs_second[r * k + j], kProbabilityFloor);
      sym += p * std::log(p / q) + q * std::log(q / p);
    }
    total += 0.5 * sym;
  }
  return total / static_cast<double>(rows);
}

double invariance_condition(const Network& net, const PairBatch& batch) {
  return invariance_condition(net.predict(batch.firsts), net.predict(batch.seconds));
}

}  // namespace ipg
