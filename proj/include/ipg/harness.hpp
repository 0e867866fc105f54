#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ipg/data.hpp"
#include "ipg/model.hpp"
#include "ipg/optimizer.hpp"

namespace ipg {

const char* mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view text);

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | idx
  std::string data_dir;              // idx source; defaults to $IPG_DATA_DIR
  bool downsample = true;            // 2x2 average of 28x28 IDX images
  std::vector<double> train_flip_probs{0.1, 0.2};
  double test_flip_prob = 0.9;
  double label_noise = 0.25;
  std::size_t train_size = 50000;  // pooled over training environments, before the validation carve-out
  std::size_t test_size = 10000;
  double val_fraction = 0.1;
};

struct RunConfig {
  ArchitectureConfig arch;
  IPGConfig ipg;
  std::size_t batch_size = 128;
  std::size_t epochs = 18;
  std::size_t n_pairs = 300;
  DatasetConfig data;
  std::uint64_t seed = 0;
  std::string output_dir;

  void validate() const;

  // Flat key/value view used by config files, CLI overrides and checkpoints.
  static const std::vector<std::string>& keys();
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
};

// `key = value` lines, `#` comments.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(std::string_view json);

struct Splits {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
};

Splits build_splits(const DatasetConfig& cfg, std::uint64_t seed);

struct Evaluation {
  std::size_t count = 0;
  double overall_acc = 0.0;
  std::array<std::optional<double>, kGroupCount> group_acc{};
  double worst_group_acc = 0.0;
  double mean_loss = 0.0;
};

// Accuracy bookkeeping from predicted labels; absent groups are excluded from the minimum.
Evaluation score_predictions(std::span<const int> predicted, std::span<const int> labels,
                             std::span<const Color> colors);
Evaluation evaluate(const Network& net, const GroupedDataset& ds, std::size_t batch_size = 1000);

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  Evaluation eval;
  double mean_d = 0.0;
  double mean_c = 0.0;
  double violation_rate = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);
std::string metrics_json(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

struct Checkpoint {
  RunConfig config;
  ModelParams params;
  OptState opt;
  std::string state_json;  // trainer position, generator state, metrics so far
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Per-epoch rows recorded in a checkpoint's trainer state.
std::vector<MetricsRow> metrics_from_state(std::string_view state_json);

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  static Trainer resume(const std::filesystem::path& checkpoint);

  const RunConfig& config() const noexcept { return cfg_; }
  const Network& network() const noexcept { return net_; }
  const Splits& splits() const noexcept { return splits_; }
  const std::vector<MetricsRow>& metrics() const noexcept { return metrics_; }
  std::size_t steps_per_epoch() const;
  std::size_t global_step() const noexcept { return step_; }
  std::size_t epoch() const noexcept { return epoch_; }
  bool finished() const noexcept { return epoch_ >= cfg_.epochs; }
  // Calls into the pair machinery (corrective gradient / condition); stays 0 for erm.
  std::size_t pair_evaluations() const noexcept { return pair_evaluations_; }
  // Epoch (1-based) with the highest validation accuracy so far.
  std::size_t selected_epoch() const;

  // One optimizer step; finishing an epoch appends its metrics rows.
  StepStats step();
  void run();

  Checkpoint checkpoint() const;
  void save_checkpoint(const std::filesystem::path& path) const;

 private:
  struct EpochTotals {
    double loss = 0, distance = 0, condition = 0;
    std::size_t violations = 0, steps = 0;
  };

  void begin_epoch();
  void finish_epoch();

  RunConfig cfg_;
  Splits splits_;
  InvariancePairSet pairs_;
  Network net_;
  OptState opt_;
  Rng pair_rng_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t epoch_ = 0, batch_ = 0, step_ = 0;
  EpochTotals totals_;
  std::vector<MetricsRow> metrics_;
  std::size_t pair_evaluations_ = 0;
};

struct TrainResult {
  Network net;
  std::vector<MetricsRow> metrics;
  std::size_t pair_evaluations = 0;
  std::size_t selected_epoch = 0;
};

// metrics.csv and final.ckpt.
void write_run_outputs(const Trainer& trainer, const std::filesystem::path& dir);

// Full run; writes metrics.csv and final.ckpt into cfg.output_dir when it is set.
TrainResult train(const RunConfig& cfg);

struct RationaleTable {
  std::size_t d = 0, k = 0;
  std::vector<std::vector<double>> rows;  // D*K entries, row-major
  std::vector<Color> a;
  std::vector<int> y;
};

// Rationales of up to max_rows (0 = all) randomly chosen examples with label class_filter.
RationaleTable export_rationales(const Network& net, const GroupedDataset& ds, int class_filter,
                                 std::size_t max_rows = 0, std::uint64_t seed = 0);
void write_rationale_csv(const RationaleTable& table, const std::filesystem::path& path);

struct Projection {
  std::vector<std::array<double, 2>> coords;
  std::array<std::vector<double>, 2> axes;
  bool rank_deficient = false;
};

// Centered rows projected on the top two principal directions.
Projection project_2d(const std::vector<std::vector<double>>& rows);
void write_projection_csv(const Projection& proj, const RationaleTable& table, const std::filesystem::path& path);

// Training-set accuracy of a nearest-centroid classifier for the attribute on 2-D points.
double nearest_centroid_accuracy(const std::vector<std::array<double, 2>>& points, const std::vector<Color>& attribute);

struct GradcheckEntry {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_error < tolerance; }
};

// Finite-difference checks for each primitive, the loss and the rationale distance.
std::vector<GradcheckEntry> run_gradcheck(std::size_t trials_per_primitive = 3, std::uint64_t seed = 1);

}  // namespace ipg
