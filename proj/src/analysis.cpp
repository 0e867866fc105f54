#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ipg/error.hpp"
#include "ipg/harness.hpp"

namespace ipg {

RationaleTable export_rationales(const Network& net, const GroupedDataset& ds, int class_filter, std::size_t max_rows,
                                 std::uint64_t seed) {
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.label(i) == class_filter) selected.push_back(i);
  if (selected.empty()) {
    fail(ErrorKind::invalid_argument, "export_rationales: no examples with label " + std::to_string(class_filter));
  }
  if (max_rows != 0 && max_rows < selected.size()) {
    Rng rng(seed);
    std::shuffle(selected.begin(), selected.end(), rng);
    selected.resize(max_rows);
    std::sort(selected.begin(), selected.end());
  }

  const Tensor& w = net.params().classifier;
  RationaleTable table;
  table.d = w.dim(0);
  table.k = w.dim(1);
  const std::span<const std::size_t> all(selected);
  constexpr std::size_t kChunk = 500;
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const auto idx = all.subspan(start, std::min(kChunk, all.size() - start));
    const Batch batch = gather_batch(ds, idx);
    const Tensor z = net.features(batch.x);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<double> row(table.d * table.k);
      for (std::size_t i = 0; i < table.d; ++i)
        for (std::size_t k = 0; k < table.k; ++k) row[i * table.k + k] = w[i * table.k + k] * z[r * table.d + i];
      table.rows.push_back(std::move(row));
      table.a.push_back(batch.colors[r]);
      table.y.push_back(batch.labels[r]);
    }
  }
  return table;
}

void write_rationale_csv(const RationaleTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  for (std::size_t i = 0; i < table.d; ++i)
    for (std::size_t k = 0; k < table.k; ++k) out << 'r' << i << '_' << k << ',';
  out << "a,y\n";
  char buf[40];
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (double v : table.rows[r]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << color_name(table.a[r]) << ',' << table.y[r] << '\n';
  }
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

Projection project_2d(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 3) fail(ErrorKind::invalid_argument, "project_2d: need at least 3 rows");
  const std::size_t n = rows.size(), p = rows.front().size();
  if (p == 0) fail(ErrorKind::invalid_argument, "project_2d: empty rows");
  std::vector<double> centered(n * p);
  std::vector<double> mean(p, 0.0);
  for (const auto& row : rows) {
    if (row.size() != p) fail(ErrorKind::invalid_argument, "project_2d: ragged rows");
    for (std::size_t j = 0; j < p; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) centered[i * p + j] = rows[i][j] - mean[j];

  PowerIterationOptions options;
  options.max_iterations = 5000;
  Projection proj;
  const SpectralResult first = top_singular(centered, n, p, options);
  proj.axes[0] = first.right;

  // Deflate the first direction and repeat.
  std::vector<double> residual = centered;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p; ++j) dot += centered[i * p + j] * first.right[j];
    for (std::size_t j = 0; j < p; ++j) residual[i * p + j] -= dot * first.right[j];
  }
  const SpectralResult second = top_singular(residual, n, p, options);
  proj.rank_deficient = first.sigma == 0.0 || second.sigma <= 1e-9 * first.sigma;
  proj.axes[1] = proj.rank_deficient ? std::vector<double>(p, 0.0) : second.right;

  // Deterministic orientation: the largest-magnitude component of each axis is positive.
  for (auto& axis : proj.axes) {
    const auto peak = std::max_element(axis.begin(), axis.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    if (peak != axis.end() && *peak < 0)
      for (double& v : axis) v = -v;
  }

  proj.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += centered[i * p + j] * proj.axes[c][j];
      proj.coords[i][c] = dot;
    }
  }
  return proj;
}

void write_projection_csv(const Projection& proj, const RationaleTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << "pc1,pc2,a,y\n";
  char buf[96];
  for (std::size_t i = 0; i < proj.coords.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", proj.coords[i][0], proj.coords[i][1]);
    out << buf << ',' << color_name(table.a[i]) << ',' << table.y[i] << '\n';
  }
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

double nearest_centroid_accuracy(const std::vector<std::array<double, 2>>& points, const std::vector<Color>& attribute) {
  if (points.size() != attribute.size() || points.empty()) {
    fail(ErrorKind::invalid_argument, "nearest_centroid_accuracy: point/label count mismatch");
  }
  std::array<std::array<double, 2>, 2> centroid{};
  std::array<std::size_t, 2> count{};
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto c = static_cast<std::size_t>(attribute[i]);
    centroid[c][0] += points[i][0];
    centroid[c][1] += points[i][1];
    ++count[c];
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (count[c] == 0) return 1.0;
    centroid[c][0] /= static_cast<double>(count[c]);
    centroid[c][1] /= static_cast<double>(count[c]);
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto dist = [&](std::size_t c) {
      const double dx = points[i][0] - centroid[c][0], dy = points[i][1] - centroid[c][1];
      return dx * dx + dy * dy;
    };
    const std::size_t guess = dist(0) <= dist(1) ? 0 : 1;
    if (guess == static_cast<std::size_t>(attribute[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(points.size());
}

}  // namespace ipg
