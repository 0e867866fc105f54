#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include "doctest.h"
#include "ipg/data.hpp"
#include "ipg/error.hpp"
#include "oracles.hpp"

using namespace ipg;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ipg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

GroupedDataset small_dataset(std::size_t n, std::uint64_t seed, double flip = 0.1) {
  return colorize(synth_digits(n, seed), EnvSpec{flip, 0.25, 0, seed + 1});
}

}  // namespace

TEST_CASE("idx images and labels") {
  const std::vector<std::uint8_t> images{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 0, 255};
  const IdxArray img = parse_idx(images);
  CHECK(img.dims == Shape{1, 2, 2});
  const Tensor t = img.to_images();
  CHECK(t.shape() == Shape{1, 2, 2});
  CHECK(values(t) == std::vector<double>{0, 1, 0, 1});

  const std::vector<std::uint8_t> labels{0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1};
  CHECK(parse_idx(labels).to_labels() == std::vector<int>{7, 2, 1});
}

TEST_CASE("idx error paths") {
  std::vector<std::uint8_t> short_payload{0, 0, 8, 1, 0, 0, 0, 3, 7, 2};
  const std::string truncated = error_of([&] { parse_idx(short_payload); });
  CHECK(truncated.find("expected 3") != std::string::npos);
  CHECK(truncated.find("got 2") != std::string::npos);

  const std::string magic = error_of([] { parse_idx(std::vector<std::uint8_t>{1, 0, 8, 1, 0, 0, 0, 0}); });
  CHECK(magic.find("offset 0") != std::string::npos);
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0, 9, 1, 0, 0, 0, 1, 5}), Error);
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0, 8, 2, 0, 0, 0}), Error);
  CHECK_THROWS_AS(read_idx_file("/nonexistent/idx"), Error);
}

TEST_CASE("mnist loader reads and downsamples idx files") {
  const auto dir = scratch_dir("mnist");
  std::vector<std::uint8_t> images{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
  for (std::uint8_t v : {0, 255, 255, 255, 0, 0, 0, 0}) images.push_back(v);
  const std::vector<std::uint8_t> labels{0, 0, 8, 1, 0, 0, 0, 2, 4, 9};
  std::ofstream(dir / "t-images-idx3-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(images.data()), static_cast<std::streamsize>(images.size()));
  std::ofstream(dir / "t-labels-idx1-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  const GlyphSet full = load_mnist_glyphs(dir, "t", false);
  CHECK(full.size() == 2);
  CHECK(full.height == 2);
  CHECK(full.digits == std::vector<int>{4, 9});
  const GlyphSet half = load_mnist_glyphs(dir, "t", true);
  CHECK(half.height == 1);
  CHECK(half.pixels[0] == doctest::Approx(0.75).epsilon(1e-7));
  CHECK(half.pixels[1] == 0.0);
}

TEST_CASE("synthetic glyphs") {
  const GlyphSet a = synth_digits(50, 3), b = synth_digits(50, 3);
  CHECK(a.pixels == b.pixels);
  CHECK(a.digits == b.digits);
  CHECK(synth_digits(50, 4).pixels != a.pixels);

  const GlyphSet ten = synth_digits(10, 1);
  CHECK(std::set<int>(ten.digits.begin(), ten.digits.end()).size() == 10);
  CHECK(ten.height == kGlyphSize);

  Rng rng(0);
  for (int d = 0; d < 10; ++d) CHECK(render_glyph(d, 0, 0, 0.0, rng) == digit_template(d));
  CHECK(digit_template(8) != digit_template(0));
  CHECK_THROWS_AS(digit_template(10), Error);
  CHECK_THROWS_AS(synth_digits(0, 1), Error);

  // Jitter is a pure translation of at most one pixel; noise stays within 0.1.
  const GlyphSet many = synth_digits(200, 9);
  for (std::size_t i = 0; i < many.size(); ++i) {
    const auto img = many.image(i);
    double best = 1e9;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        Rng unused(0);
        const auto clean = render_glyph(many.digits[i], dx, dy, 0.0, unused);
        double worst = 0;
        for (std::size_t p = 0; p < clean.size(); ++p) worst = std::max(worst, std::abs(clean[p] - img[p]));
        best = std::min(best, worst);
      }
    CHECK(best <= 0.1 + 1e-7);
  }
}

TEST_CASE("colorize deterministic cases") {
  GlyphSet three;
  three.height = three.width = kGlyphSize;
  three.pixels = digit_template(3);
  three.digits = {3};
  const GroupedDataset red = colorize(three, EnvSpec{0.0, 0.0, 0, 5});
  CHECK(red.label(0) == 0);
  CHECK(red.color(0) == Color::red);
  const GroupedDataset always = small_dataset(500, 2, 1.0);
  for (std::size_t i = 0; i < always.size(); ++i) CHECK(static_cast<int>(always.color(i)) != always.label(i));
  CHECK_THROWS_AS(colorize(three, EnvSpec{1.5, 0.0, 0, 1}), Error);
}

TEST_CASE("colorized images occupy exactly the channel of their color") {
  const GroupedDataset ds = small_dataset(300, 7);
  const std::size_t plane = ds.height() * ds.width();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto img = ds.image(i);
    const std::size_t off = ds.color(i) == Color::red ? plane : 0;
    for (std::size_t p = 0; p < plane; ++p) CHECK(img[off + p] == 0.0);
  }
}

TEST_CASE("label noise and color flip frequencies lie within three sigma") {
  const std::size_t n = 50000;
  const GlyphSet glyphs = synth_digits(n, 11);
  const GroupedDataset ds = colorize(glyphs, EnvSpec{0.1, 0.25, 0, 12});
  std::size_t label_flips = 0, color_flips = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int base = glyphs.digits[i] <= 4 ? 0 : 1;
    label_flips += ds.label(i) != base ? 1 : 0;
    color_flips += static_cast<int>(ds.color(i)) != ds.label(i) ? 1 : 0;
  }
  CHECK(oracle::within_three_sigma(label_flips, n, 0.25));
  CHECK(oracle::within_three_sigma(color_flips, n, 0.1));
}

TEST_CASE("group bookkeeping and environment asymmetry") {
  const auto correlation = [](const GroupedDataset& ds) {
    double sa = 0, sy = 0, say = 0, saa = 0, syy = 0;
    const double n = static_cast<double>(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double a = static_cast<double>(ds.color(i)), y = ds.label(i);
      sa += a;
      sy += y;
      say += a * y;
      saa += a * a;
      syy += y * y;
    }
    return (say / n - sa * sy / (n * n)) / std::sqrt((saa / n - sa * sa / (n * n)) * (syy / n - sy * sy / (n * n)));
  };
  const GroupedDataset train = small_dataset(4000, 21, 0.1);
  const GroupedDataset test = small_dataset(4000, 22, 0.9);
  CHECK(correlation(train) > 0.5);
  CHECK(correlation(test) < -0.5);
  const auto counts = train.group_counts();
  CHECK(counts[0] + counts[1] + counts[2] + counts[3] == train.size());
  for (std::size_t i = 0; i < 50; ++i) CHECK(train.group(i).index() == static_cast<std::size_t>(train.color(i)) * 2 + static_cast<std::size_t>(train.label(i)));
}

TEST_CASE("color flip pairs") {
  const GroupedDataset ds = small_dataset(40, 31);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Example e = ds.example(i);
    CHECK(values(flip_color(flip_color(e.x))) == values(e.x));
    const InvariancePair pair = make_color_flip_pair(e);
    if (e.a == Color::red) {
      CHECK(values(pair.first) == values(e.x));
    } else {
      CHECK(values(pair.second) == values(e.x));
    }
    CHECK(values(pair.second) == values(flip_color(pair.first)));
    std::multiset<double> left(pair.first.data().begin(), pair.first.data().end());
    std::multiset<double> right(pair.second.data().begin(), pair.second.data().end());
    CHECK(left == right);
    // Red first: the green channel of `first` is empty.
    const std::size_t plane = ds.height() * ds.width();
    for (std::size_t p = 0; p < plane; ++p) CHECK(pair.first[plane + p] == 0.0);
  }
  CHECK_THROWS_AS(flip_color(Tensor({3, 1, 1}, {1, 2, 3})), Error);
}

TEST_CASE("pair set construction") {
  const GroupedDataset ds = small_dataset(1000, 41);
  CHECK(build_pair_set(ds, 300, 1).size() == 300);
  CHECK(build_pair_set(ds, 1, 1).size() == 1);
  const InvariancePairSet a = build_pair_set(ds, 50, 9), b = build_pair_set(ds, 50, 9);
  std::set<std::vector<double>> distinct;
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(values(a[i].first) == values(b[i].first));
    distinct.insert(values(a[i].first));
  }
  CHECK(distinct.size() > 40);  // glyph duplicates are possible, index duplicates are not
  CHECK_THROWS_AS(build_pair_set(GroupedDataset(14, 14), 3, 1), Error);
  CHECK_THROWS_AS(build_pair_set(ds, 0, 1), Error);
}

TEST_CASE("augmentation pairs are generated per batch") {
  GroupedDataset reds(kGlyphSize, kGlyphSize);
  const GroupedDataset mixed = small_dataset(64, 51);
  for (std::size_t i = 0; i < mixed.size(); ++i)
    if (mixed.color(i) == Color::red) reds.add(mixed.image(i), mixed.label(i), Color::red);
  std::vector<std::size_t> idx(reds.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Batch batch = gather_batch(reds, idx);
  const PairBatch pairs = pairs_from_batch_aa(batch.x);
  CHECK(pairs.size() == reds.size());
  CHECK(values(pairs.firsts) == values(batch.x));
  CHECK(values(flip_color(pairs.seconds)) == values(pairs.firsts));

  std::vector<std::size_t> all(mixed.size());
  std::iota(all.begin(), all.end(), 0);
  const Batch mb = gather_batch(mixed, all);
  const PairBatch mp = pairs_from_batch_aa(mb.x);
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    const auto expected = make_color_flip_pair(mixed.example(i));
    const std::size_t sz = mixed.image_size();
    CHECK(std::equal(expected.first.data().begin(), expected.first.data().end(), mp.firsts.data().begin() + static_cast<long>(i * sz)));
  }
}

TEST_CASE("batch iteration") {
  const GroupedDataset ds = small_dataset(10, 61);
  std::vector<std::size_t> sizes;
  for (const auto& b : iterate_batches(ds, 3, 1, true)) sizes.push_back(b.labels.size());
  CHECK(sizes == std::vector<std::size_t>{3, 3, 3, 1});
  const auto ordered = plan_batches(10, 3, 1, false);
  CHECK(ordered[0] == std::vector<std::size_t>{0, 1, 2});
  CHECK(ordered[3] == std::vector<std::size_t>{9});
  CHECK(plan_batches(10, 3, 5, true) == plan_batches(10, 3, 5, true));
  CHECK(plan_batches(100, 10, 5, true) != plan_batches(100, 10, 6, true));
  std::set<std::size_t> covered;
  for (const auto& b : plan_batches(100, 7, 3, true)) covered.insert(b.begin(), b.end());
  CHECK(covered.size() == 100);
  CHECK_THROWS_AS(iterate_batches(GroupedDataset(14, 14), 3, 1, true), Error);
  CHECK_THROWS_AS(plan_batches(10, 0, 1, true), Error);
}

TEST_CASE("dataset files round-trip bit-exactly") {
  const auto dir = scratch_dir("dataset");
  const GroupedDataset ds = small_dataset(120, 71);
  save_dataset(ds, dir / "d.ds");
  std::ifstream header(dir / "d.ds");
  std::string line;
  std::getline(header, line);
  CHECK(line == "ipg-ds v1 120 14 14");
  const GroupedDataset back = load_dataset(dir / "d.ds");
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.label(i) == ds.label(i));
    CHECK(back.color(i) == ds.color(i));
    CHECK(std::equal(ds.image(i).begin(), ds.image(i).end(), back.image(i).begin()));
  }
  std::filesystem::resize_file(dataset_payload_path(dir / "d.ds"), 100);
  CHECK_THROWS_AS(load_dataset(dir / "d.ds"), Error);
  CHECK_THROWS_AS(load_dataset(dir / "missing.ds"), Error);

  GroupedDataset odd(1, 1);
  odd.add(std::vector<double>{0.1, 0.0}, 0, Color::red);
  CHECK_THROWS_AS(save_dataset(odd, dir / "odd.ds"), Error);
}
