#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ipg/invariance.hpp"
#include "ipg/tensor.hpp"

namespace ipg {

// splitmix64 over (seed, stream); used to derive independent generator seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

enum class Color : std::uint8_t { red = 0, green = 1 };

const char* color_name(Color c);

struct Group {
  Color a;
  int y;
  // 0..3 in the order red/0, red/1, green/0, green/1.
  std::size_t index() const { return static_cast<std::size_t>(a) * 2 + static_cast<std::size_t>(y); }
};

inline constexpr std::size_t kGroupCount = 4;

struct Example {
  Tensor x;  // [2,H,W]: channel 0 red, channel 1 green
  int y;
  Color a;
  Group group() const { return {a, y}; }
};

class GroupedDataset {
 public:
  GroupedDataset(std::size_t height, std::size_t width) : height_(height), width_(width) {}

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t image_size() const noexcept { return 2 * height_ * width_; }

  void add(std::span<const double> image, int y, Color a);
  Example example(std::size_t i) const;
  std::span<const double> image(std::size_t i) const;
  int label(std::size_t i) const { return labels_.at(i); }
  Color color(std::size_t i) const { return colors_.at(i); }
  Group group(std::size_t i) const { return {color(i), label(i)}; }
  std::array<std::size_t, kGroupCount> group_counts() const;

  GroupedDataset subset(std::span<const std::size_t> indices) const;
  void append(const GroupedDataset& other);

 private:
  std::size_t height_, width_;
  std::vector<double> pixels_;
  std::vector<int> labels_;
  std::vector<Color> colors_;
};

struct EnvSpec {
  double color_flip_prob = 0.1;
  double label_noise = 0.25;
  std::size_t size = 0;  // 0: use every glyph
  std::uint64_t seed = 0;
  void validate() const;
};

// Grayscale digit images with digit labels 0..9.
struct GlyphSet {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;
  std::vector<int> digits;
  std::size_t size() const noexcept { return digits.size(); }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * height * width, height * width);
  }
};

// Decoded IDX container (unsigned-byte payloads only).
struct IdxArray {
  Shape dims;
  std::vector<std::uint8_t> values;
  // Bytes scaled to [0,1] in the declared shape.
  Tensor to_images() const;
  std::vector<int> to_labels() const;
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx_file(const std::filesystem::path& path);

// Reads <prefix>-images-idx3-ubyte / <prefix>-labels-idx1-ubyte from dir; optional 2x2 average downsampling.
GlyphSet load_mnist_glyphs(const std::filesystem::path& dir, const std::string& prefix, bool downsample,
                           std::size_t limit = 0);

inline constexpr std::size_t kGlyphSize = 14;

// Undistorted 14x14 segment template for a digit.
std::vector<double> digit_template(int digit);
// Template shifted by (dx, dy) with uniform per-pixel noise of at most noise_amplitude.
std::vector<double> render_glyph(int digit, int dx, int dy, double noise_amplitude, Rng& rng);
// Stratified: glyph i shows digit i % 10.
GlyphSet synth_digits(std::size_t n, std::uint64_t seed);

GroupedDataset colorize(const GlyphSet& glyphs, const EnvSpec& spec);

// Swaps the red and green channels of [2,H,W] or [N,2,H,W].
Tensor flip_color(const Tensor& x);
// (red version, green version) of the same glyph.
InvariancePair make_color_flip_pair(const Example& example);
// Pairs from distinct examples sampled without replacement.
InvariancePairSet build_pair_set(const GroupedDataset& source, std::size_t n_pairs, std::uint64_t seed);
// One red-first pair per element of a [B,2,H,W] batch.
PairBatch pairs_from_batch_aa(const Tensor& batch);

struct Batch {
  Tensor x;  // [B,2,H,W]
  std::vector<int> labels;
  std::vector<Color> colors;
};

// Index partition for one pass; last short batch kept.
std::vector<std::vector<std::size_t>> plan_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   bool shuffle);
Batch gather_batch(const GroupedDataset& ds, std::span<const std::size_t> indices);
std::vector<Batch> iterate_batches(const GroupedDataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle);

// Header + records at `path`, float32 little-endian pixels at `path`.bin.
void save_dataset(const GroupedDataset& ds, const std::filesystem::path& path);
GroupedDataset load_dataset(const std::filesystem::path& path);
std::filesystem::path dataset_payload_path(const std::filesystem::path& path);

}  // namespace ipg
