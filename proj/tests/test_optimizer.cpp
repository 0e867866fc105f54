#include <map>

#include "doctest.h"
#include "ipg/error.hpp"
#include "ipg/optimizer.hpp"
#include "oracles.hpp"

using namespace ipg;

namespace {

std::vector<double> flat(const ModelParams& p) {
  std::vector<double> out;
  for (const auto& t : p.tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (oracle::norm(a) * oracle::norm(b));
}

ModelParams scalar_params(double theta) {
  ModelParams p;
  p.classifier = Tensor({1, 1}, {theta}, true);
  return p;
}

ArchitectureConfig tiny_arch() {
  ArchitectureConfig arch;
  arch.height = 3;
  arch.width = 3;
  arch.hidden = {6, 4};
  return arch;
}

Tensor random_images(std::size_t n, std::mt19937_64& rng) {
  return Tensor({n, 2, 3, 3}, oracle::random_vector(n * 18, rng, 0, 1));
}

std::vector<int> random_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng() % 2);
  return y;
}

}  // namespace

TEST_CASE("config validation") {
  IPGConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.threshold = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.epsilon = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.eta = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.threshold = INFINITY;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("rescale examples") {
  const std::vector<double> g1{3, 4}, unit{1, 0}, zero{0, 0};
  const auto r = rescale(g1, unit, 1e-8);
  CHECK(r[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(oracle::norm(rescale(g1, zero, 0.5)) == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> g{1.5, -2, 0.25};
  const auto same = rescale(g, g, 1e-8);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(same[i] == doctest::Approx(g[i]).epsilon(1e-15));
  CHECK_THROWS_AS(rescale(zero, unit, 1e-8), Error);
  CHECK_THROWS_AS(rescale(g1, std::vector<double>{1, 2, 3}, 1e-8), Error);
}

TEST_CASE("shape_loss_gradient examples") {
  IPGConfig cfg;
  cfg.threshold = 1e-3;
  const std::vector<double> big{6, 8}, unit{0, 1}, zero{0, 0};
  auto s = shape_loss_gradient(big, unit, 2e-3, cfg);
  CHECK(s.branch == ShapeBranch::violated);
  CHECK(oracle::norm(s.gradient) == doctest::Approx(0.1).epsilon(1e-14));
  s = shape_loss_gradient(std::vector<double>{0.6, 0.8}, unit, 0.0, cfg);
  CHECK(s.branch == ShapeBranch::unchanged);
  CHECK(s.gradient == std::vector<double>{0.6, 0.8});
  s = shape_loss_gradient(big, unit, 0.0, cfg);
  CHECK(s.branch == ShapeBranch::capped);
  CHECK(oracle::norm(s.gradient) == doctest::Approx(2.0).epsilon(1e-14));
  s = shape_loss_gradient(zero, unit, 1.0, cfg);
  CHECK(s.branch == ShapeBranch::zero_input);
  CHECK(s.gradient == zero);
}

TEST_CASE("shaping contract over 1000 random tuples") {
  std::mt19937_64 rng(2718);
  std::uniform_real_distribution<double> u(0, 1);
  std::map<ShapeBranch, int> seen;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    IPGConfig cfg;
    cfg.alpha = u(rng);
    cfg.threshold = u(rng) < 0.1 ? 0.0 : std::pow(10.0, -8 + 8 * u(rng));
    cfg.epsilon = std::pow(10.0, -10 + 9 * u(rng));
    const double c = u(rng) < 0.5 ? cfg.threshold * 2 * u(rng) : cfg.threshold + u(rng);
    std::vector<double> g_l = oracle::random_vector(n, rng);
    for (double& v : g_l) v *= std::pow(10.0, -3 + 6 * u(rng));
    std::vector<double> g_d = oracle::random_vector(n, rng);
    const double gd_scale = u(rng) < 0.1 ? 0.0 : std::pow(10.0, -4 + 6 * u(rng));
    for (double& v : g_d) v *= gd_scale;
    if (trial % 97 == 0) std::fill(g_l.begin(), g_l.end(), 0.0);

    const ShapedGradient s = shape_loss_gradient(g_l, g_d, c, cfg);
    ++seen[s.branch];
    const double floor_len = std::max(cfg.epsilon, oracle::norm(g_d));
    const double out = oracle::norm(s.gradient);
    if (oracle::norm(g_l) == 0.0) {
      CHECK(s.branch == ShapeBranch::zero_input);
      CHECK(out == 0.0);
      continue;
    }
    CHECK(cosine(s.gradient, g_l) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < n; ++i) CHECK(s.gradient[i] * g_l[i] >= 0.0);
    if (c > cfg.threshold) {
      CHECK(s.branch == ShapeBranch::violated);
      CHECK(out == doctest::Approx(cfg.alpha * floor_len).epsilon(1e-12));
    } else {
      CHECK((s.branch == ShapeBranch::unchanged || s.branch == ShapeBranch::capped));
      CHECK(out <= 2 * floor_len * (1 + 1e-12));
      if (s.branch == ShapeBranch::unchanged) CHECK(s.gradient == g_l);
      if (s.branch == ShapeBranch::capped) CHECK(out == doctest::Approx(2 * floor_len).epsilon(1e-12));
    }
  }
  CHECK(seen[ShapeBranch::violated] > 0);
  CHECK(seen[ShapeBranch::unchanged] > 0);
  CHECK(seen[ShapeBranch::capped] > 0);
  CHECK(seen[ShapeBranch::zero_input] > 0);
}

TEST_CASE("sigma_update examples") {
  ModelParams p = scalar_params(1.0);
  OptState s = OptState::zeros_like(p);
  sigma_update(p, s.velocity, std::vector<double>{2.0}, 0.1, 0.0);
  CHECK(p.classifier[0] == doctest::Approx(0.8).epsilon(1e-15));

  p = scalar_params(1.5);
  s = OptState::zeros_like(p);
  sigma_update(p, s.velocity, std::vector<double>{0.0}, 0.3, 0.9);
  CHECK(p.classifier[0] == 1.5);

  p = scalar_params(0.0);
  s = OptState::zeros_like(p);
  sigma_update(p, s.velocity, std::vector<double>{1.0}, 1.0, 0.9);
  CHECK(p.classifier[0] == doctest::Approx(-1.0).epsilon(1e-15));
  sigma_update(p, s.velocity, std::vector<double>{1.0}, 1.0, 0.9);
  CHECK(p.classifier[0] == doctest::Approx(-2.9).epsilon(1e-15));

  CHECK_THROWS_AS(sigma_update(p, s.velocity, std::vector<double>{NAN}, 1.0, 0.9), Error);
  CHECK(p.classifier[0] == doctest::Approx(-2.9).epsilon(1e-15));
  CHECK_THROWS_AS(sigma_update(p, s.velocity, std::vector<double>{1.0, 2.0}, 1.0, 0.9), Error);
}

TEST_CASE("ipg_step follows the two-stage order exactly") {
  std::mt19937_64 rng(5);
  const ArchitectureConfig arch = tiny_arch();
  IPGConfig cfg;
  cfg.eta = 0.05;
  const Network start = Network::initialize(arch, 3);
  const Tensor x = random_images(6, rng);
  const auto y = random_labels(6, rng);
  const PairBatch pairs = make_pair_batch(random_images(6, rng), random_images(6, rng));

  Network a = start;
  OptState sa = OptState::zeros_like(a.params());
  const StepStats stats = ipg_step(a, sa, x, y, pairs, cfg);

  // Same update assembled from the building blocks.
  Network b = start;
  OptState sb = OptState::zeros_like(b.params());
  const CorrectiveGradient g_d = corrective_gradient(b, pairs);
  const double c = invariance_condition(g_d.probs_first, g_d.probs_second);
  sigma_update(b.params(), sb.velocity, g_d.gradient, cfg.eta, cfg.momentum);
  const auto [loss, grad] = loss_and_gradient(b, x, y);
  const ShapedGradient shaped = shape_loss_gradient(grad, g_d.gradient, c, cfg);
  sigma_update(b.params(), sb.velocity, shaped.gradient, cfg.eta, cfg.momentum);

  CHECK(flat(a.params()) == flat(b.params()));
  CHECK(stats.loss == loss);
  CHECK(stats.distance == g_d.distance);
  CHECK(stats.condition == c);
  CHECK(stats.violated == (c > cfg.threshold));
  CHECK(stats.corrective_norm == doctest::Approx(oracle::norm(g_d.gradient)));
  CHECK(stats.shaped_norm == doctest::Approx(oracle::norm(shaped.gradient)));
}

TEST_CASE("degenerate pairs skip the corrective update and cap at 2 epsilon") {
  std::mt19937_64 rng(6);
  const ArchitectureConfig arch = tiny_arch();
  IPGConfig cfg;
  cfg.eta = 0.1;
  cfg.threshold = INFINITY;
  Network net = Network::initialize(arch, 4);
  const std::vector<double> before = flat(net.params());
  const Tensor x = random_images(5, rng);
  const auto y = random_labels(5, rng);
  const Tensor same = random_images(5, rng);
  OptState s = OptState::zeros_like(net.params());
  const StepStats stats = ipg_step(net, s, x, y, make_pair_batch(same, same), cfg);
  CHECK(stats.degenerate);
  CHECK_FALSE(stats.violated);
  const std::vector<double> after = flat(net.params());
  std::vector<double> moved(before.size());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = (before[i] - after[i]) / cfg.eta;
  CHECK(oracle::norm(moved) == doctest::Approx(2 * cfg.epsilon).epsilon(1e-6));
}

TEST_CASE("ipg with never-violated condition and degenerate pairs reproduces erm bitwise") {
  std::mt19937_64 rng(7);
  const ArchitectureConfig arch = tiny_arch();
  IPGConfig cfg;
  cfg.threshold = INFINITY;
  cfg.epsilon = 1e6;
  cfg.eta = 0.05;
  Network a = Network::initialize(arch, 9), b = a;
  OptState sa = OptState::zeros_like(a.params()), sb = OptState::zeros_like(b.params());
  for (int step = 0; step < 20; ++step) {
    const Tensor x = random_images(8, rng);
    const auto y = random_labels(8, rng);
    const Tensor same = random_images(8, rng);
    ipg_step(a, sa, x, y, make_pair_batch(same, same), cfg);
    erm_step(b, sb, x, y, cfg.eta, cfg.momentum);
  }
  CHECK(flat(a.params()) == flat(b.params()));
}

TEST_CASE("separate momentum keeps two buffers") {
  std::mt19937_64 rng(8);
  const ArchitectureConfig arch = tiny_arch();
  IPGConfig cfg;
  cfg.separate_momentum = true;
  Network net = Network::initialize(arch, 2);
  OptState s = OptState::zeros_like(net.params());
  ipg_step(net, s, random_images(4, rng), random_labels(4, rng),
           make_pair_batch(random_images(4, rng), random_images(4, rng)), cfg);
  bool loss_velocity_used = false, velocity_used = false;
  for (const auto& v : s.loss_velocity)
    for (double e : v) loss_velocity_used = loss_velocity_used || e != 0.0;
  for (const auto& v : s.velocity)
    for (double e : v) velocity_used = velocity_used || e != 0.0;
  CHECK(loss_velocity_used);
  CHECK(velocity_used);
}

TEST_CASE("ipg_step is bit-reproducible") {
  const ArchitectureConfig arch = tiny_arch();
  const auto run = [&] {
    std::mt19937_64 rng(10);
    Network net = Network::initialize(arch, 5);
    OptState s = OptState::zeros_like(net.params());
    for (int i = 0; i < 3; ++i) {
      ipg_step(net, s, random_images(4, rng), random_labels(4, rng),
               make_pair_batch(random_images(4, rng), random_images(4, rng)), IPGConfig{});
    }
    return flat(net.params());
  };
  CHECK(run() == run());
}

TEST_CASE("erm descends on a linearly separable toy set") {
  std::mt19937_64 rng(11);
  const ArchitectureConfig arch = tiny_arch();
  std::vector<double> pixels;
  std::vector<int> labels;
  for (int i = 0; i < 32; ++i) {
    const int y = i % 2;
    for (int c = 0; c < 2; ++c)
      for (int p = 0; p < 9; ++p) pixels.push_back(c == y ? 0.8 + 0.2 * std::uniform_real_distribution<double>()(rng) : 0.0);
    labels.push_back(y);
  }
  const Tensor x({32, 2, 3, 3}, pixels);
  Network net = Network::initialize(arch, 1);
  OptState s = OptState::zeros_like(net.params());
  const double first = loss_and_gradient(net, x, labels).first;
  for (int step = 0; step < 100; ++step) erm_step(net, s, x, labels, 0.05, 0.9);
  CHECK(loss_and_gradient(net, x, labels).first < first);

  const std::vector<double> before = flat(net.params());
  OptState fresh = OptState::zeros_like(net.params());
  erm_step(net, fresh, x, labels, 0.0, 0.9);
  CHECK(flat(net.params()) == before);
}
