#include "ipg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "ipg/error.hpp"

namespace ipg {

namespace {

double to_float_grid(double v) { return static_cast<double>(static_cast<float>(v)); }

bool bernoulli(Rng& rng, double p) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < p;
}

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (static_cast<std::uint32_t>(bytes[offset]) << 24) | (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) | static_cast<std::uint32_t>(bytes[offset + 3]);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Seven-segment layout inside the 14x14 canvas: {row0, row1, col0, col1} inclusive.
struct Segment {
  int r0, r1, c0, c1;
};
constexpr Segment kSegments[7] = {
    {2, 3, 4, 9},    // top
    {2, 7, 8, 9},    // upper right
    {6, 11, 8, 9},   // lower right
    {10, 11, 4, 9},  // bottom
    {6, 11, 4, 5},   // lower left
    {2, 7, 4, 5},    // upper left
    {6, 7, 4, 9},    // middle
};
// Bit s set: segment s lit.
constexpr std::uint8_t kDigitSegments[10] = {
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110,
    0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111,
};

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const char* color_name(Color c) { return c == Color::red ? "red" : "green"; }

void GroupedDataset::add(std::span<const double> image, int y, Color a) {
  if (image.size() != image_size()) fail(ErrorKind::invalid_argument, "dataset: image size mismatch");
  if (y != 0 && y != 1) fail(ErrorKind::invalid_argument, "dataset: label must be 0 or 1");
  pixels_.insert(pixels_.end(), image.begin(), image.end());
  labels_.push_back(y);
  colors_.push_back(a);
}

std::span<const double> GroupedDataset::image(std::size_t i) const {
  if (i >= size()) fail(ErrorKind::invalid_argument, "dataset: index out of range");
  return std::span<const double>(pixels_).subspan(i * image_size(), image_size());
}

Example GroupedDataset::example(std::size_t i) const {
  const auto img = image(i);
  return {Tensor({2, height_, width_}, std::vector<double>(img.begin(), img.end())), labels_[i], colors_[i]};
}

std::array<std::size_t, kGroupCount> GroupedDataset::group_counts() const {
  std::array<std::size_t, kGroupCount> counts{};
  for (std::size_t i = 0; i < size(); ++i) ++counts[group(i).index()];
  return counts;
}

GroupedDataset GroupedDataset::subset(std::span<const std::size_t> indices) const {
  GroupedDataset out(height_, width_);
  out.pixels_.reserve(indices.size() * image_size());
  for (auto i : indices) out.add(image(i), labels_[i], colors_[i]);
  return out;
}

void GroupedDataset::append(const GroupedDataset& other) {
  if (other.height_ != height_ || other.width_ != width_) {
    fail(ErrorKind::invalid_argument, "dataset: cannot append images of a different size");
  }
  pixels_.insert(pixels_.end(), other.pixels_.begin(), other.pixels_.end());
  labels_.insert(labels_.end(), other.labels_.begin(), other.labels_.end());
  colors_.insert(colors_.end(), other.colors_.begin(), other.colors_.end());
}

void EnvSpec::validate() const {
  const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(color_flip_prob) || !prob(label_noise)) {
    fail(ErrorKind::invalid_argument, "env spec: probabilities must lie in [0,1]");
  }
}

Tensor IdxArray::to_images() const {
  std::vector<double> scaled(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) scaled[i] = to_float_grid(values[i] / 255.0);
  return Tensor(dims, std::move(scaled));
}

std::vector<int> IdxArray::to_labels() const { return {values.begin(), values.end()}; }

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) fail(ErrorKind::io, "idx: stream shorter than the 4-byte magic");
  if (bytes[0] != 0 || bytes[1] != 0) fail(ErrorKind::io, "idx: bad magic at offset 0 (expected two zero bytes)");
  if (bytes[2] != 0x08) fail(ErrorKind::io, "idx: unsupported data type at offset 2 (only 0x08 unsigned byte)");
  const std::size_t ndim = bytes[3];
  if (ndim == 0) fail(ErrorKind::io, "idx: zero dimensions at offset 3");
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() < header) {
    fail(ErrorKind::io, "idx: truncated header, expected " + std::to_string(header) + " bytes, got " +
                            std::to_string(bytes.size()));
  }
  IdxArray out;
  for (std::size_t d = 0; d < ndim; ++d) {
    const std::uint32_t extent = read_be32(bytes, 4 + 4 * d);
    if (extent == 0) fail(ErrorKind::io, "idx: zero extent at offset " + std::to_string(4 + 4 * d));
    out.dims.push_back(extent);
  }
  const std::size_t expected = shape_size(out.dims);
  const std::size_t actual = bytes.size() - header;
  if (actual < expected) {
    fail(ErrorKind::io, "idx: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                            std::to_string(actual));
  }
  out.values.assign(bytes.begin() + static_cast<long>(header), bytes.begin() + static_cast<long>(header + expected));
  return out;
}

IdxArray read_idx_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_idx(bytes);
}

GlyphSet load_mnist_glyphs(const std::filesystem::path& dir, const std::string& prefix, bool downsample,
                           std::size_t limit) {
  const IdxArray images = read_idx_file(dir / (prefix + "-images-idx3-ubyte"));
  const IdxArray labels = read_idx_file(dir / (prefix + "-labels-idx1-ubyte"));
  if (images.dims.size() != 3 || labels.dims.size() != 1 || images.dims[0] != labels.dims[0]) {
    fail(ErrorKind::io, "mnist: image/label files disagree in " + dir.string());
  }
  const std::size_t count = limit == 0 ? images.dims[0] : std::min(limit, images.dims[0]);
  const std::size_t h = images.dims[1], w = images.dims[2];
  GlyphSet out;
  out.height = downsample ? h / 2 : h;
  out.width = downsample ? w / 2 : w;
  out.pixels.reserve(count * out.height * out.width);
  for (std::size_t n = 0; n < count; ++n) {
    const std::uint8_t* src = images.values.data() + n * h * w;
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) {
        double v;
        if (downsample) {
          v = (src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1] + src[(2 * y + 1) * w + 2 * x] +
               src[(2 * y + 1) * w + 2 * x + 1]) /
              (4.0 * 255.0);
        } else {
          v = src[y * w + x] / 255.0;
        }
        out.pixels.push_back(to_float_grid(v));
      }
    }
    const int digit = labels.values[n];
    if (digit > 9) fail(ErrorKind::io, "mnist: label out of range");
    out.digits.push_back(digit);
  }
  return out;
}

std::vector<double> digit_template(int digit) {
  if (digit < 0 || digit > 9) fail(ErrorKind::invalid_argument, "digit_template: digit must be 0..9");
  std::vector<double> img(kGlyphSize * kGlyphSize, 0.0);
  for (int s = 0; s < 7; ++s) {
    if (!(kDigitSegments[digit] & (1u << s))) continue;
    const Segment& seg = kSegments[s];
    for (int r = seg.r0; r <= seg.r1; ++r)
      for (int c = seg.c0; c <= seg.c1; ++c) img[static_cast<std::size_t>(r) * kGlyphSize + static_cast<std::size_t>(c)] = 1.0;
  }
  return img;
}

std::vector<double> render_glyph(int digit, int dx, int dy, double noise_amplitude, Rng& rng) {
  const std::vector<double> base = digit_template(digit);
  const int n = static_cast<int>(kGlyphSize);
  std::vector<double> img(base.size(), 0.0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const int sr = r - dy, sc = c - dx;
      if (sr < 0 || sr >= n || sc < 0 || sc >= n) continue;
      img[static_cast<std::size_t>(r * n + c)] = base[static_cast<std::size_t>(sr * n + sc)];
    }
  }
  if (noise_amplitude > 0.0) {
    std::uniform_real_distribution<double> noise(-noise_amplitude, noise_amplitude);
    for (double& v : img) v = to_float_grid(std::clamp(v + noise(rng), 0.0, 1.0));
  }
  return img;
}

GlyphSet synth_digits(std::size_t n, std::uint64_t seed) {
  if (n == 0) fail(ErrorKind::invalid_argument, "synth_digits: need at least one glyph");
  Rng rng(seed);
  std::uniform_int_distribution<int> shift(-1, 1);
  GlyphSet out;
  out.height = out.width = kGlyphSize;
  out.pixels.reserve(n * kGlyphSize * kGlyphSize);
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(i % 10);
    const int dx = shift(rng);
    const int dy = shift(rng);
    const auto img = render_glyph(digit, dx, dy, 0.1, rng);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.digits.push_back(digit);
  }
  return out;
}

GroupedDataset colorize(const GlyphSet& glyphs, const EnvSpec& spec) {
  spec.validate();
  const std::size_t count = spec.size == 0 ? glyphs.size() : spec.size;
  if (count > glyphs.size()) {
    fail(ErrorKind::invalid_argument, "colorize: asked for " + std::to_string(count) + " examples from " +
                                          std::to_string(glyphs.size()) + " glyphs");
  }
  Rng rng(spec.seed);
  GroupedDataset ds(glyphs.height, glyphs.width);
  const std::size_t plane = glyphs.height * glyphs.width;
  std::vector<double> image(2 * plane);
  for (std::size_t i = 0; i < count; ++i) {
    int y = glyphs.digits[i] <= 4 ? 0 : 1;
    if (bernoulli(rng, spec.label_noise)) y = 1 - y;
    int color = y;
    if (bernoulli(rng, spec.color_flip_prob)) color = 1 - color;
    std::fill(image.begin(), image.end(), 0.0);
    const auto src = glyphs.image(i);
    std::copy(src.begin(), src.end(), image.begin() + static_cast<long>(static_cast<std::size_t>(color) * plane));
    ds.add(image, y, static_cast<Color>(color));
  }
  return ds;
}

Tensor flip_color(const Tensor& x) {
  const bool single = x.rank() == 3;
  if (!(single || x.rank() == 4) || x.dim(single ? 0 : 1) != 2) {
    fail(ErrorKind::invalid_argument, "flip_color: expected [2,H,W] or [N,2,H,W], got " + shape_string(x.shape()));
  }
  const std::size_t plane = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  const std::size_t images = single ? 1 : x.dim(0);
  std::vector<double> out(x.size());
  for (std::size_t n = 0; n < images; ++n) {
    const double* src = x.data().data() + n * 2 * plane;
    double* dst = out.data() + n * 2 * plane;
    std::copy(src, src + plane, dst + plane);
    std::copy(src + plane, src + 2 * plane, dst);
  }
  return Tensor(x.shape(), std::move(out));
}

InvariancePair make_color_flip_pair(const Example& example) {
  Tensor flipped = flip_color(example.x);
  if (example.a == Color::red) return {example.x, std::move(flipped)};
  return {std::move(flipped), example.x};
}

InvariancePairSet build_pair_set(const GroupedDataset& source, std::size_t n_pairs, std::uint64_t seed) {
  if (source.empty()) fail(ErrorKind::invalid_argument, "build_pair_set: empty source dataset");
  if (n_pairs == 0) fail(ErrorKind::invalid_argument, "build_pair_set: need at least one pair");
  Rng rng(seed);
  std::vector<std::size_t> order(source.size());
  std::vector<InvariancePair> pairs;
  pairs.reserve(n_pairs);
  // Without replacement; asking for more pairs than examples cycles through fresh permutations.
  while (pairs.size() < n_pairs) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size() && pairs.size() < n_pairs; ++i) {
      pairs.push_back(make_color_flip_pair(source.example(order[i])));
    }
  }
  return InvariancePairSet(std::move(pairs));
}

PairBatch pairs_from_batch_aa(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 2) {
    fail(ErrorKind::invalid_argument, "pairs_from_batch_aa: expected [B,2,H,W], got " + shape_string(batch.shape()));
  }
  const std::size_t plane = batch.dim(2) * batch.dim(3);
  std::vector<double> firsts(batch.size()), seconds(batch.size());
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    const double* src = batch.data().data() + n * 2 * plane;
    // The glyph occupies one channel and the other is zero, so their sum is the glyph.
    double* red = firsts.data() + n * 2 * plane;
    double* green = seconds.data() + n * 2 * plane + plane;
    for (std::size_t p = 0; p < plane; ++p) red[p] = green[p] = src[p] + src[plane + p];
  }
  return make_pair_batch(Tensor(batch.shape(), std::move(firsts)), Tensor(batch.shape(), std::move(seconds)));
}

std::vector<std::vector<std::size_t>> plan_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   bool shuffle) {
  if (n == 0) fail(ErrorKind::invalid_argument, "iterate_batches: empty dataset");
  if (batch_size == 0) fail(ErrorKind::invalid_argument, "iterate_batches: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return batches;
}

Batch gather_batch(const GroupedDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorKind::invalid_argument, "gather_batch: empty index list");
  Batch batch;
  std::vector<double> values;
  values.reserve(indices.size() * ds.image_size());
  for (auto i : indices) {
    const auto img = ds.image(i);
    values.insert(values.end(), img.begin(), img.end());
    batch.labels.push_back(ds.label(i));
    batch.colors.push_back(ds.color(i));
  }
  batch.x = Tensor({indices.size(), 2, ds.height(), ds.width()}, std::move(values));
  return batch;
}

std::vector<Batch> iterate_batches(const GroupedDataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  std::vector<Batch> out;
  for (const auto& idx : plan_batches(ds.size(), batch_size, seed, shuffle)) out.push_back(gather_batch(ds, idx));
  return out;
}

std::filesystem::path dataset_payload_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".bin";
  return p;
}

void save_dataset(const GroupedDataset& ds, const std::filesystem::path& path) {
  std::ofstream header(path);
  if (!header) fail(ErrorKind::io, "cannot write " + path.string());
  header << "ipg-ds v1 " << ds.size() << ' ' << ds.height() << ' ' << ds.width() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) header << ds.label(i) << ' ' << static_cast<int>(ds.color(i)) << '\n';
  if (!header) fail(ErrorKind::io, "write failed for " + path.string());

  std::ofstream payload(dataset_payload_path(path), std::ios::binary);
  if (!payload) fail(ErrorKind::io, "cannot write " + dataset_payload_path(path).string());
  std::vector<char> buffer(ds.image_size() * 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto img = ds.image(i);
    for (std::size_t p = 0; p < img.size(); ++p) {
      const float f = static_cast<float>(img[p]);
      if (static_cast<double>(f) != img[p]) fail(ErrorKind::invalid_argument, "save_dataset: pixel not float32-exact");
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      for (int b = 0; b < 4; ++b) buffer[p * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
    payload.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  }
  if (!payload) fail(ErrorKind::io, "write failed for " + dataset_payload_path(path).string());
}

GroupedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream header(path);
  if (!header) fail(ErrorKind::io, "cannot open " + path.string());
  std::string magic, version;
  std::size_t n = 0, h = 0, w = 0;
  header >> magic >> version >> n >> h >> w;
  if (!header || magic != "ipg-ds" || version != "v1" || h == 0 || w == 0) {
    fail(ErrorKind::io, path.string() + ": not an ipg-ds v1 file");
  }
  const std::vector<std::uint8_t> payload = read_file(dataset_payload_path(path));
  const std::size_t image_bytes = 2 * h * w * 4;
  if (payload.size() != n * image_bytes) {
    fail(ErrorKind::io, dataset_payload_path(path).string() + ": expected " + std::to_string(n * image_bytes) +
                            " bytes, got " + std::to_string(payload.size()));
  }
  GroupedDataset ds(h, w);
  std::vector<double> image(2 * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    int y = -1, a = -1;
    header >> y >> a;
    if (!header || (y != 0 && y != 1) || (a != 0 && a != 1)) {
      fail(ErrorKind::io, path.string() + ": bad record " + std::to_string(i));
    }
    const std::uint8_t* src = payload.data() + i * image_bytes;
    for (std::size_t p = 0; p < image.size(); ++p) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[p * 4 + static_cast<std::size_t>(b)]) << (8 * b);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      image[p] = f;
    }
    ds.add(image, y, static_cast<Color>(a));
  }
  return ds;
}

}  // namespace ipg
