#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "ipg/error.hpp"
#include "ipg/harness.hpp"

namespace ipg {

namespace {

constexpr char kCheckpointMagic[4] = {'I', 'P', 'G', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Generator streams derived from the run seed.
constexpr std::uint64_t kTrainGlyphStream = 1;
constexpr std::uint64_t kValSplitStream = 2;
constexpr std::uint64_t kTestGlyphStream = 3;
constexpr std::uint64_t kTestColorStream = 4;
constexpr std::uint64_t kTrainEnvStream = 10;
constexpr std::uint64_t kInitStream = 20;
constexpr std::uint64_t kPairSetStream = 21;
constexpr std::uint64_t kPairSamplingStream = 22;
constexpr std::uint64_t kEpochStream = 100;

GlyphSet slice(const GlyphSet& g, std::size_t begin, std::size_t end) {
  GlyphSet out;
  out.height = g.height;
  out.width = g.width;
  const std::size_t plane = g.height * g.width;
  out.pixels.assign(g.pixels.begin() + static_cast<long>(begin * plane), g.pixels.begin() + static_cast<long>(end * plane));
  out.digits.assign(g.digits.begin() + static_cast<long>(begin), g.digits.begin() + static_cast<long>(end));
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("nan"); }

nlohmann::json row_to_json(const MetricsRow& row) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : row.eval.group_acc) groups.push_back(g ? nlohmann::json(*g) : nlohmann::json(nullptr));
  return {{"epoch", row.epoch},         {"split", row.split},
          {"count", row.eval.count},    {"overall_acc", row.eval.overall_acc},
          {"group_acc", groups},        {"worst_group_acc", row.eval.worst_group_acc},
          {"mean_loss", row.eval.mean_loss}, {"mean_d", row.mean_d},
          {"mean_c", row.mean_c},       {"violation_rate", row.violation_rate}};
}

MetricsRow row_from_json(const nlohmann::json& j) {
  MetricsRow row;
  row.epoch = j.at("epoch").get<std::size_t>();
  row.split = j.at("split").get<std::string>();
  row.eval.count = j.at("count").get<std::size_t>();
  row.eval.overall_acc = j.at("overall_acc").get<double>();
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    const auto& v = j.at("group_acc").at(g);
    if (!v.is_null()) row.eval.group_acc[g] = v.get<double>();
  }
  row.eval.worst_group_acc = j.at("worst_group_acc").get<double>();
  row.eval.mean_loss = j.at("mean_loss").get<double>();
  row.mean_d = j.at("mean_d").get<double>();
  row.mean_c = j.at("mean_c").get<double>();
  row.violation_rate = j.at("violation_rate").get<double>();
  return row;
}

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  for (int b = 0; b < 2; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}
void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * b);
    return v;
  }
  double f64() {
    const std::uint64_t bits = uint(8);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::io, path_ + ": truncated checkpoint at offset " + std::to_string(pos_));
  }
  const std::vector<char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const Shape& shape, std::span<const double> data) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put_u8(out, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : data) put_f64(out, v);
}

}  // namespace

Splits build_splits(const DatasetConfig& cfg, std::uint64_t seed) {
  GlyphSet train_glyphs, test_glyphs;
  if (cfg.source == "idx") {
    std::string dir = cfg.data_dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("IPG_DATA_DIR")) dir = env;
    }
    if (dir.empty()) fail(ErrorKind::invalid_argument, "data: idx source needs data_dir or IPG_DATA_DIR");
    train_glyphs = load_mnist_glyphs(dir, "train", cfg.downsample, cfg.train_size);
    test_glyphs = load_mnist_glyphs(dir, "t10k", cfg.downsample, cfg.test_size);
  } else {
    train_glyphs = synth_digits(cfg.train_size, derive_seed(seed, kTrainGlyphStream));
    test_glyphs = synth_digits(cfg.test_size, derive_seed(seed, kTestGlyphStream));
  }

  GroupedDataset pooled(train_glyphs.height, train_glyphs.width);
  const std::size_t envs = cfg.train_flip_probs.size();
  for (std::size_t e = 0; e < envs; ++e) {
    const std::size_t begin = train_glyphs.size() * e / envs;
    const std::size_t end = train_glyphs.size() * (e + 1) / envs;
    const EnvSpec spec{cfg.train_flip_probs[e], cfg.label_noise, 0, derive_seed(seed, kTrainEnvStream + e)};
    pooled.append(colorize(slice(train_glyphs, begin, end), spec));
  }

  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, kValSplitStream));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(pooled.size())));
  const std::span<const std::size_t> all(order);

  const EnvSpec test_spec{cfg.test_flip_prob, cfg.label_noise, 0, derive_seed(seed, kTestColorStream)};
  return {pooled.subset(all.subspan(n_val)), pooled.subset(all.first(n_val)), colorize(test_glyphs, test_spec)};
}

Evaluation score_predictions(std::span<const int> predicted, std::span<const int> labels,
                             std::span<const Color> colors) {
  if (predicted.size() != labels.size() || labels.size() != colors.size()) {
    fail(ErrorKind::invalid_argument, "evaluate: prediction/label count mismatch");
  }
  if (labels.empty()) fail(ErrorKind::invalid_argument, "evaluate: empty dataset");
  std::array<std::size_t, kGroupCount> total{}, correct{};
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t g = Group{colors[i], labels[i]}.index();
    ++total[g];
    if (predicted[i] == labels[i]) {
      ++correct[g];
      ++hits;
    }
  }
  Evaluation ev;
  ev.count = labels.size();
  ev.overall_acc = static_cast<double>(hits) / static_cast<double>(labels.size());
  ev.worst_group_acc = 1.0;
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    if (total[g] == 0) continue;
    const double acc = static_cast<double>(correct[g]) / static_cast<double>(total[g]);
    ev.group_acc[g] = acc;
    ev.worst_group_acc = std::min(ev.worst_group_acc, acc);
  }
  return ev;
}

Evaluation evaluate(const Network& net, const GroupedDataset& ds, std::size_t batch_size) {
  if (ds.empty()) fail(ErrorKind::invalid_argument, "evaluate: empty dataset");
  std::vector<int> predicted, labels;
  std::vector<Color> colors;
  double loss = 0.0;
  for (const auto& idx : plan_batches(ds.size(), batch_size, 0, false)) {
    const Batch b = gather_batch(ds, idx);
    const Tensor probs = net.predict(b.x);
    const std::size_t k = probs.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* row = probs.data().data() + i * k;
      predicted.push_back(static_cast<int>(std::max_element(row, row + k) - row));
      loss -= std::log(std::max(row[b.labels[i]], kProbabilityFloor));
    }
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    colors.insert(colors.end(), b.colors.begin(), b.colors.end());
  }
  Evaluation ev = score_predictions(predicted, labels, colors);
  ev.mean_loss = loss / static_cast<double>(ds.size());
  return ev;
}

std::string metrics_csv_header() {
  return "epoch,split,overall_acc,acc_red_0,acc_red_1,acc_green_0,acc_green_1,worst_group_acc,mean_loss,mean_d,mean_c,"
         "violation_rate";
}

std::string metrics_csv_line(const MetricsRow& row) {
  std::string line = std::to_string(row.epoch) + "," + row.split + "," + fmt(row.eval.overall_acc);
  for (const auto& g : row.eval.group_acc) line += "," + fmt(g);
  line += "," + fmt(row.eval.worst_group_acc) + "," + fmt(row.eval.mean_loss) + "," + fmt(row.mean_d) + "," +
          fmt(row.mean_c) + "," + fmt(row.violation_rate);
  return line;
}

std::string metrics_json(const MetricsRow& row) {
  nlohmann::ordered_json j;
  j["epoch"] = row.epoch;
  j["split"] = row.split;
  j["count"] = row.eval.count;
  j["overall_acc"] = row.eval.overall_acc;
  static const char* names[kGroupCount] = {"acc_red_0", "acc_red_1", "acc_green_0", "acc_green_1"};
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    j[names[g]] = row.eval.group_acc[g] ? nlohmann::ordered_json(*row.eval.group_acc[g]) : nlohmann::ordered_json(nullptr);
  }
  j["worst_group_acc"] = row.eval.worst_group_acc;
  j["mean_loss"] = row.eval.mean_loss;
  j["mean_d"] = row.mean_d;
  j["mean_c"] = row.mean_c;
  j["violation_rate"] = row.violation_rate;
  return j.dump();
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << metrics_csv_header() << '\n';
  for (const auto& row : rows) out << metrics_csv_line(row) << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto names = ckpt.params.names();
  const auto tensors = ckpt.params.tensors();
  if (ckpt.opt.velocity.size() != tensors.size() || ckpt.opt.loss_velocity.size() != tensors.size()) {
    fail(ErrorKind::invalid_argument, "checkpoint: optimizer state does not match parameters");
  }
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(3 * tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) put_tensor(out, "param/" + names[i], tensors[i].shape(), tensors[i].data());
  for (std::size_t i = 0; i < tensors.size(); ++i)
    put_tensor(out, "velocity/" + names[i], tensors[i].shape(), ckpt.opt.velocity[i]);
  for (std::size_t i = 0; i < tensors.size(); ++i)
    put_tensor(out, "loss_velocity/" + names[i], tensors[i].shape(), ckpt.opt.loss_velocity[i]);

  nlohmann::json blob;
  blob["config"] = nlohmann::json::parse(config_to_json(ckpt.config));
  blob["state"] = ckpt.state_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(ckpt.state_json);
  const std::string text = blob.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;

  std::ofstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::io, "cannot write checkpoint " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) fail(ErrorKind::io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
  Reader in(bytes, path.string());
  if (in.text(4) != std::string(kCheckpointMagic, 4)) fail(ErrorKind::io, path.string() + ": bad checkpoint magic");
  if (const auto version = in.uint(4); version != kCheckpointVersion) {
    fail(ErrorKind::io, path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = static_cast<std::size_t>(in.uint(4));
  if (count % 3 != 0 || count == 0) fail(ErrorKind::io, path.string() + ": bad tensor count");
  const std::size_t per_group = count / 3;

  std::vector<std::pair<std::string, Tensor>> params;
  Checkpoint ckpt;
  for (std::size_t t = 0; t < count; ++t) {
    const std::string name = in.text(static_cast<std::size_t>(in.uint(2)));
    const auto ndim = static_cast<std::size_t>(in.uint(1));
    Shape shape;
    for (std::size_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::size_t>(in.uint(4)));
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = in.f64();
    const std::size_t group = t / per_group;
    const char* prefix = group == 0 ? "param/" : group == 1 ? "velocity/" : "loss_velocity/";
    if (name.rfind(prefix, 0) != 0) fail(ErrorKind::io, path.string() + ": unexpected tensor " + name);
    if (group == 0) {
      params.emplace_back(name.substr(6), Tensor(std::move(shape), std::move(values), true));
    } else if (group == 1) {
      ckpt.opt.velocity.push_back(std::move(values));
    } else {
      ckpt.opt.loss_velocity.push_back(std::move(values));
    }
  }
  if (params.back().first != "classifier") fail(ErrorKind::io, path.string() + ": classifier tensor missing");
  for (std::size_t i = 0; i + 1 < params.size(); ++i) ckpt.params.feature.push_back({params[i].first, params[i].second});
  ckpt.params.classifier = params.back().second;

  const auto blob_size = static_cast<std::size_t>(in.uint(4));
  const auto blob = nlohmann::json::parse(in.text(blob_size), nullptr, false);
  if (blob.is_discarded() || !blob.contains("config")) fail(ErrorKind::io, path.string() + ": corrupt JSON blob");
  ckpt.config = config_from_json(blob.at("config").dump());
  ckpt.state_json = blob.value("state", nlohmann::json::object()).dump();
  return ckpt;
}

Trainer::Trainer(RunConfig cfg)
    : cfg_(std::move(cfg)),
      splits_(build_splits(cfg_.data, cfg_.seed)),
      net_([this] {
        cfg_.arch.height = splits_.train.height();
        cfg_.arch.width = splits_.train.width();
        cfg_.validate();
        return Network::initialize(cfg_.arch, derive_seed(cfg_.seed, kInitStream));
      }()),
      opt_(OptState::zeros_like(net_.params())),
      pair_rng_(derive_seed(cfg_.seed, kPairSamplingStream)) {
  if (splits_.train.empty()) fail(ErrorKind::invalid_argument, "trainer: empty training split");
  if (cfg_.ipg.mode == TrainMode::ipg) {
    pairs_ = build_pair_set(splits_.train, cfg_.n_pairs, derive_seed(cfg_.seed, kPairSetStream));
  }
}

std::size_t Trainer::steps_per_epoch() const {
  return (splits_.train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

std::size_t Trainer::selected_epoch() const {
  std::size_t best = 0;
  double best_acc = -1.0;
  for (const auto& row : metrics_) {
    if (row.split == "val" && row.eval.overall_acc > best_acc) {
      best_acc = row.eval.overall_acc;
      best = row.epoch;
    }
  }
  return best;
}

void Trainer::begin_epoch() {
  plan_ = plan_batches(splits_.train.size(), cfg_.batch_size, derive_seed(cfg_.seed, kEpochStream + epoch_),
                       true);
}

void Trainer::finish_epoch() {
  const double steps = static_cast<double>(std::max<std::size_t>(totals_.steps, 1));
  const auto add_row = [&](const char* split, const GroupedDataset& ds) {
    if (ds.empty()) return;
    MetricsRow row;
    row.epoch = epoch_ + 1;
    row.split = split;
    row.eval = evaluate(net_, ds);
    row.mean_d = totals_.distance / steps;
    row.mean_c = totals_.condition / steps;
    row.violation_rate = static_cast<double>(totals_.violations) / steps;
    metrics_.push_back(std::move(row));
  };
  add_row("train", splits_.train);
  add_row("val", splits_.val);
  add_row("test", splits_.test);
  ++epoch_;
  batch_ = 0;
  plan_.clear();
  totals_ = {};
}

StepStats Trainer::step() {
  if (finished()) fail(ErrorKind::invalid_argument, "trainer: all epochs already completed");
  if (plan_.empty()) begin_epoch();
  const Batch batch = gather_batch(splits_.train, plan_[batch_]);
  const auto& ipg = cfg_.ipg;

  StepStats stats;
  try {
    if (ipg.mode == TrainMode::erm) {
      stats.loss = erm_step(net_, opt_, batch.x, batch.labels, ipg.eta, ipg.momentum);
    } else {
      const PairBatch pairs = ipg.mode == TrainMode::ipg ? sample_pair_batch(pairs_, batch.labels.size(), pair_rng_)
                                                         : pairs_from_batch_aa(batch.x);
      ++pair_evaluations_;
      stats = ipg_step(net_, opt_, batch.x, batch.labels, pairs, ipg);
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::numeric) throw;
    fail(ErrorKind::numeric, "training diverged at step " + std::to_string(step_) + ": " + e.what());
  }
  if (!std::isfinite(stats.loss)) {
    fail(ErrorKind::numeric, "training diverged at step " + std::to_string(step_) + ": non-finite loss (d=" +
                                 std::to_string(stats.distance) + ", c=" + std::to_string(stats.condition) + ")");
  }

  totals_.loss += stats.loss;
  totals_.distance += stats.distance;
  totals_.condition += stats.condition;
  totals_.violations += stats.violated ? 1 : 0;
  ++totals_.steps;
  ++batch_;
  ++step_;
  if (batch_ == plan_.size()) finish_epoch();
  return stats;
}

void Trainer::run() {
  while (!finished()) step();
}

Checkpoint Trainer::checkpoint() const {
  std::ostringstream rng_state;
  rng_state << pair_rng_;
  nlohmann::json state;
  state["epoch"] = epoch_;
  state["batch"] = batch_;
  state["step"] = step_;
  state["pair_rng"] = rng_state.str();
  state["pair_evaluations"] = pair_evaluations_;
  state["totals"] = {{"loss", totals_.loss},           {"distance", totals_.distance},
                     {"condition", totals_.condition}, {"violations", totals_.violations},
                     {"steps", totals_.steps}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : metrics_) rows.push_back(row_to_json(row));
  state["metrics"] = rows;
  return {cfg_, net_.params(), opt_, state.dump()};
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const { ipg::save_checkpoint(path, checkpoint()); }

std::vector<MetricsRow> metrics_from_state(std::string_view state_json) {
  std::vector<MetricsRow> rows;
  if (state_json.empty()) return rows;
  const auto state = nlohmann::json::parse(state_json, nullptr, false);
  if (state.is_discarded()) fail(ErrorKind::io, "checkpoint: trainer state is not valid JSON");
  for (const auto& row : state.value("metrics", nlohmann::json::array())) rows.push_back(row_from_json(row));
  return rows;
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  Trainer trainer(ckpt.config);
  trainer.net_ = Network(trainer.cfg_.arch, std::move(ckpt.params));
  trainer.opt_ = std::move(ckpt.opt);

  const auto state = nlohmann::json::parse(ckpt.state_json);
  trainer.epoch_ = state.value("epoch", std::size_t{0});
  trainer.batch_ = state.value("batch", std::size_t{0});
  trainer.step_ = state.value("step", std::size_t{0});
  trainer.pair_evaluations_ = state.value("pair_evaluations", std::size_t{0});
  if (state.contains("pair_rng")) {
    std::istringstream in(state.at("pair_rng").get<std::string>());
    in >> trainer.pair_rng_;
    if (!in) fail(ErrorKind::io, checkpoint.string() + ": corrupt generator state");
  }
  if (state.contains("totals")) {
    const auto& t = state.at("totals");
    trainer.totals_ = {t.at("loss").get<double>(), t.at("distance").get<double>(), t.at("condition").get<double>(),
                       t.at("violations").get<std::size_t>(), t.at("steps").get<std::size_t>()};
  }
  for (const auto& row : state.value("metrics", nlohmann::json::array())) trainer.metrics_.push_back(row_from_json(row));
  if (trainer.batch_ > 0) trainer.begin_epoch();
  return trainer;
}

void write_run_outputs(const Trainer& trainer, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + dir.string() + ": " + ec.message());
  write_metrics_csv(trainer.metrics(), dir / "metrics.csv");
  trainer.save_checkpoint(dir / "final.ckpt");
}

TrainResult train(const RunConfig& cfg) {
  Trainer trainer(cfg);
  trainer.run();
  if (!cfg.output_dir.empty()) write_run_outputs(trainer, cfg.output_dir);
  return {trainer.network(), trainer.metrics(), trainer.pair_evaluations(), trainer.selected_epoch()};
}

}  // namespace ipg
