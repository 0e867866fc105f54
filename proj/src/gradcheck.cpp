#include <algorithm>
#include <cmath>

#include "ipg/error.hpp"
#include "ipg/harness.hpp"
#include "ipg/invariance.hpp"

namespace ipg {

namespace {

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-4;
constexpr double kDistanceTolerance = 1e-3;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values));
}

// Values bounded away from zero so relu kinks are never straddled by the step.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(values));
}

// Distinct values spaced well above the step so maxpool winners stay put.
Tensor distinct_values(Shape shape, Rng& rng) {
  const std::size_t n = shape_size(shape);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = 0.05 * static_cast<double>(i);
  std::shuffle(values.begin(), values.end(), rng);
  return Tensor(std::move(shape), std::move(values));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Scalar root sum(op(x) * R) for a fixed random R shaped like the output.
template <typename Op>
double check_unary_family(std::vector<Tensor> inputs, Op op, Rng& rng) {
  const Tensor probe = op(inputs);
  const Tensor weights = random_tensor(probe.shape(), rng);
  return fd_check([&](const std::vector<Tensor>& xs) { return sum_all(multiply(op(xs), weights)); }, inputs, kStep);
}

ModelParams randomized(const Network& net, Rng& rng) {
  ModelParams p = net.params();
  std::vector<Tensor> tensors = p.tensors();
  for (auto& t : tensors) t = random_tensor(t.shape(), rng, -0.5, 0.5);
  p.assign(std::move(tensors));
  return p;
}

Tensor random_images(std::size_t n, const ArchitectureConfig& arch, Rng& rng) {
  return random_tensor({n, arch.channels, arch.height, arch.width}, rng, 0.0, 1.0);
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> labels(n);
  for (int& y : labels) y = static_cast<int>(pick(rng, 0, 1));
  return labels;
}

Network with_tensors(const Network& net, const std::vector<Tensor>& tensors) {
  ModelParams p = net.params();
  p.assign(tensors);
  return Network(net.arch(), std::move(p));
}

double check_network_loss(const ArchitectureConfig& arch, Rng& rng) {
  const Network base = Network::initialize(arch, rng());
  const Network net(arch, randomized(base, rng));
  const std::size_t n = pick(rng, 2, 5);
  const Tensor x = random_images(n, arch, rng);
  const std::vector<int> labels = random_labels(n, rng);
  return fd_check(
      [&](const std::vector<Tensor>& ps) {
        const Network local = with_tensors(net, ps);
        return cross_entropy(local.predict(x), labels);
      },
      net.params().tensors(), kStep);
}

ArchitectureConfig tiny_mlp(Rng& rng) {
  ArchitectureConfig arch;
  arch.height = pick(rng, 2, 4);
  arch.width = pick(rng, 2, 4);
  arch.hidden = {pick(rng, 3, 6), pick(rng, 2, 5)};
  return arch;
}

ArchitectureConfig tiny_cnn(Rng& rng) {
  ArchitectureConfig arch;
  arch.kind = ArchKind::cnn;
  arch.height = 4;
  arch.width = 4;
  arch.conv_channels = {pick(rng, 2, 3)};
  arch.cnn_feature_dim = pick(rng, 2, 4);
  return arch;
}

// Scalar of the rationale matrix of one input: sum(R * M).
double check_rationale(Rng& rng) {
  const ArchitectureConfig arch = tiny_mlp(rng);
  const Network net(arch, randomized(Network::initialize(arch, rng()), rng));
  const Tensor x = random_images(1, arch, rng);
  const Tensor weights = random_tensor({arch.feature_dim(), arch.classes}, rng);
  return fd_check(
      [&](const std::vector<Tensor>& ps) { return sum_all(multiply(with_tensors(net, ps).rationale(x), weights)); },
      net.params().tensors(), kStep);
}

// The distance is not a tape expression, so its finite differences are taken
// directly on flat parameter coordinates against the corrective gradient.
double check_distance(Rng& rng) {
  const ArchitectureConfig arch = tiny_mlp(rng);
  const Network net(arch, randomized(Network::initialize(arch, rng()), rng));
  const std::size_t b = pick(rng, 2, 4);
  const PairBatch batch = make_pair_batch(random_images(b, arch, rng), random_images(b, arch, rng));
  const CorrectiveGradient analytic = corrective_gradient(net, batch);

  const auto distance_at = [&](const std::vector<Tensor>& ps) {
    const Network local = with_tensors(net, ps);
    return rationale_distance(mean_rationale(local, batch.firsts), mean_rationale(local, batch.seconds));
  };

  std::vector<Tensor> tensors = net.params().tensors();
  double worst = 0.0;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const Tensor original = tensors[i];
    std::vector<double> values(original.data().begin(), original.data().end());
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double v = values[j];
      values[j] = v + kStep;
      tensors[i] = Tensor(original.shape(), values);
      const double up = distance_at(tensors);
      values[j] = v - kStep;
      tensors[i] = Tensor(original.shape(), values);
      const double down = distance_at(tensors);
      values[j] = v;
      const double numeric = (up - down) / (2.0 * kStep);
      worst = std::max(worst, std::abs(analytic.gradient[offset + j] - numeric) / std::max(1.0, std::abs(numeric)));
    }
    tensors[i] = original;
    offset += values.size();
  }
  return worst;
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck(std::size_t trials_per_primitive, std::uint64_t seed) {
  if (trials_per_primitive == 0) fail(ErrorKind::invalid_argument, "gradcheck: need at least one trial");
  Rng rng(seed);
  std::vector<GradcheckEntry> entries;

  const auto run = [&](std::string name, double tolerance, auto&& trial) {
    GradcheckEntry entry{std::move(name), 0.0, tolerance};
    for (std::size_t t = 0; t < trials_per_primitive; ++t) entry.max_error = std::max(entry.max_error, trial());
    entries.push_back(std::move(entry));
  };

  run("matmul", kTolerance, [&] {
    const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    return check_unary_family({random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                              [](const std::vector<Tensor>& v) { return matmul(v[0], v[1]); }, rng);
  });
  run("conv2d", kTolerance, [&] {
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 3, 5), w = pick(rng, 3, 5), pad = pick(rng, 0, 1);
    return check_unary_family(
        {random_tensor({n, c, h, w}, rng), random_tensor({o, c, 3, 3}, rng), random_tensor({o}, rng)},
        [pad](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], pad); }, rng);
  });
  run("relu", kTolerance, [&] {
    return check_unary_family({away_from_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng)},
                              [](const std::vector<Tensor>& v) { return relu(v[0]); }, rng);
  });
  run("add", kTolerance, [&] {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
    return check_unary_family({random_tensor(s, rng), random_tensor(s, rng)},
                              [](const std::vector<Tensor>& v) { return add(v[0], v[1]); }, rng);
  });
  run("subtract", kTolerance, [&] {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
    return check_unary_family({random_tensor(s, rng), random_tensor(s, rng)},
                              [](const std::vector<Tensor>& v) { return subtract(v[0], v[1]); }, rng);
  });
  run("scale", kTolerance, [&] {
    const double factor = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    return check_unary_family({random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)},
                              [factor](const std::vector<Tensor>& v) { return scale(v[0], factor); }, rng);
  });
  run("multiply", kTolerance, [&] {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
    return check_unary_family({random_tensor(s, rng), random_tensor(s, rng)},
                              [](const std::vector<Tensor>& v) { return multiply(v[0], v[1]); }, rng);
  });
  run("mean", kTolerance, [&] {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3)};
    const std::size_t axis = pick(rng, 0, 2);
    return check_unary_family({random_tensor(s, rng)},
                              [axis](const std::vector<Tensor>& v) { return mean(v[0], axis); }, rng);
  });
  run("reshape", kTolerance, [&] {
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    return check_unary_family({random_tensor({a, b}, rng)},
                              [a, b](const std::vector<Tensor>& v) { return reshape(v[0], {b, a}); }, rng);
  });
  run("softmax", kTolerance, [&] {
    return check_unary_family({random_tensor({pick(rng, 1, 4), pick(rng, 2, 5)}, rng, -3.0, 3.0)},
                              [](const std::vector<Tensor>& v) { return softmax(v[0]); }, rng);
  });
  run("log", kTolerance, [&] {
    return check_unary_family({random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng, 0.2, 2.0)},
                              [](const std::vector<Tensor>& v) { return log(v[0]); }, rng);
  });
  run("maxpool2", kTolerance, [&] {
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 2, 5)};
    return check_unary_family({distinct_values(s, rng)},
                              [](const std::vector<Tensor>& v) { return maxpool2(v[0]); }, rng);
  });
  run("loss_mlp", kTolerance, [&] { return check_network_loss(tiny_mlp(rng), rng); });
  run("loss_cnn", kTolerance, [&] { return check_network_loss(tiny_cnn(rng), rng); });
  run("rationale", kTolerance, [&] { return check_rationale(rng); });
  run("distance", kDistanceTolerance, [&] { return check_distance(rng); });
  return entries;
}

}  // namespace ipg
