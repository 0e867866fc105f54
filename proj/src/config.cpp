#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

#include "ipg/error.hpp"
#include "ipg/harness.hpp"

namespace ipg {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  fail(ErrorKind::invalid_argument,
       "config: key '" + std::string(key) + "' expects " + expected + ", got '" + std::string(value) + "'");
}

double to_double(std::string_view key, std::string_view value) {
  const std::string s = trim(value);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || std::isnan(v)) bad_value(key, value, "a number");
  return v;
}

std::uint64_t to_uint(std::string_view key, std::string_view value) {
  const std::string s = trim(value);
  char* end = nullptr;
  errno = 0;
  if (s.empty() || s[0] == '-') bad_value(key, value, "a non-negative integer");
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE) bad_value(key, value, "a non-negative integer");
  return v;
}

bool to_bool(std::string_view key, std::string_view value) {
  const std::string s = trim(value);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad_value(key, value, "a boolean");
}

template <typename T, typename Parse>
std::vector<T> to_list(std::string_view key, std::string_view value, Parse parse) {
  std::vector<T> out;
  std::string s = trim(value);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(parse(key, item)));
  if (out.empty()) bad_value(key, value, "a comma-separated list");
  return out;
}

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  // Shortest text that parses back to the same double.
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string fmt_list(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

struct Field {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define IPG_DOUBLE_FIELD(key, member)                                                     \
  Field {                                                                                 \
    key, [](RunConfig& c, std::string_view v) { c.member = to_double(key, v); },          \
        [](const RunConfig& c) { return fmt_double(c.member); }                           \
  }
#define IPG_SIZE_FIELD(key, member)                                                                      \
  Field {                                                                                                \
    key, [](RunConfig& c, std::string_view v) { c.member = static_cast<std::size_t>(to_uint(key, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                      \
  }
#define IPG_BOOL_FIELD(key, member)                                               \
  Field {                                                                         \
    key, [](RunConfig& c, std::string_view v) { c.member = to_bool(key, v); },    \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"mode", [](RunConfig& c, std::string_view v) { c.ipg.mode = parse_mode(trim(v)); },
       [](const RunConfig& c) { return std::string(mode_name(c.ipg.mode)); }},
      {"arch",
       [](RunConfig& c, std::string_view v) {
         const std::string s = trim(v);
         if (s == "mlp") {
           c.arch.kind = ArchKind::mlp;
         } else if (s == "cnn") {
           c.arch.kind = ArchKind::cnn;
         } else {
           bad_value("arch", v, "mlp or cnn");
         }
       },
       [](const RunConfig& c) { return std::string(c.arch.kind == ArchKind::mlp ? "mlp" : "cnn"); }},
      {"hidden", [](RunConfig& c, std::string_view v) { c.arch.hidden = to_list<std::size_t>("hidden", v, to_uint); },
       [](const RunConfig& c) { return fmt_list(c.arch.hidden); }},
      {"conv_channels",
       [](RunConfig& c, std::string_view v) { c.arch.conv_channels = to_list<std::size_t>("conv_channels", v, to_uint); },
       [](const RunConfig& c) { return fmt_list(c.arch.conv_channels); }},
      IPG_SIZE_FIELD("feature_dim", arch.cnn_feature_dim),
      IPG_DOUBLE_FIELD("alpha", ipg.alpha),
      IPG_DOUBLE_FIELD("t", ipg.threshold),
      IPG_DOUBLE_FIELD("epsilon", ipg.epsilon),
      IPG_DOUBLE_FIELD("eta", ipg.eta),
      IPG_DOUBLE_FIELD("momentum", ipg.momentum),
      IPG_BOOL_FIELD("separate_momentum", ipg.separate_momentum),
      IPG_SIZE_FIELD("batch_size", batch_size),
      IPG_SIZE_FIELD("epochs", epochs),
      IPG_SIZE_FIELD("n_pairs", n_pairs),
      {"source",
       [](RunConfig& c, std::string_view v) {
         const std::string s = trim(v);
         if (s != "synthetic" && s != "idx") bad_value("source", v, "synthetic or idx");
         c.data.source = s;
       },
       [](const RunConfig& c) { return c.data.source; }},
      {"data_dir", [](RunConfig& c, std::string_view v) { c.data.data_dir = trim(v); },
       [](const RunConfig& c) { return c.data.data_dir; }},
      IPG_BOOL_FIELD("downsample", data.downsample),
      {"train_flip_probs",
       [](RunConfig& c, std::string_view v) { c.data.train_flip_probs = to_list<double>("train_flip_probs", v, to_double); },
       [](const RunConfig& c) { return fmt_list(c.data.train_flip_probs); }},
      IPG_DOUBLE_FIELD("test_flip_prob", data.test_flip_prob),
      IPG_DOUBLE_FIELD("label_noise", data.label_noise),
      IPG_SIZE_FIELD("train_size", data.train_size),
      IPG_SIZE_FIELD("test_size", data.test_size),
      IPG_DOUBLE_FIELD("val_fraction", data.val_fraction),
      {"seed", [](RunConfig& c, std::string_view v) { c.seed = to_uint("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"output_dir", [](RunConfig& c, std::string_view v) { c.output_dir = trim(v); },
       [](const RunConfig& c) { return c.output_dir; }},
  };
  return table;
}

#undef IPG_DOUBLE_FIELD
#undef IPG_SIZE_FIELD
#undef IPG_BOOL_FIELD

const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.name == key) return f;
  fail(ErrorKind::invalid_argument, "config: unknown key '" + std::string(key) + "'");
}

}  // namespace

const char* mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::erm: return "erm";
    case TrainMode::ipg: return "ipg";
    case TrainMode::ipg_aa: return "ipg_aa";
  }
  return "unknown";
}

TrainMode parse_mode(std::string_view text) {
  if (text == "erm") return TrainMode::erm;
  if (text == "ipg") return TrainMode::ipg;
  if (text == "ipg_aa" || text == "ipg-aa") return TrainMode::ipg_aa;
  fail(ErrorKind::invalid_argument, "config: mode must be erm, ipg or ipg_aa, got '" + std::string(text) + "'");
}

void RunConfig::validate() const {
  arch.validate();
  ipg.validate();
  if (arch.classes != 2) fail(ErrorKind::invalid_argument, "config: ColoredMNIST runs are binary (classes = 2)");
  if (batch_size == 0) fail(ErrorKind::invalid_argument, "config: batch_size must be >= 1");
  if (epochs == 0) fail(ErrorKind::invalid_argument, "config: epochs must be >= 1");
  if (ipg.mode == TrainMode::ipg && n_pairs == 0) fail(ErrorKind::invalid_argument, "config: n_pairs must be >= 1");
  if (data.train_flip_probs.empty()) fail(ErrorKind::invalid_argument, "config: need at least one training environment");
  for (double p : data.train_flip_probs)
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::invalid_argument, "config: train_flip_probs must lie in [0,1]");
  if (!(data.test_flip_prob >= 0.0 && data.test_flip_prob <= 1.0) || !(data.label_noise >= 0.0 && data.label_noise <= 1.0)) {
    fail(ErrorKind::invalid_argument, "config: probabilities must lie in [0,1]");
  }
  if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) {
    fail(ErrorKind::invalid_argument, "config: val_fraction must lie in [0,1)");
  }
  if (data.train_size < data.train_flip_probs.size() || data.test_size == 0) {
    fail(ErrorKind::invalid_argument, "config: dataset sizes too small");
  }
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.name);
    return out;
  }();
  return names;
}

void RunConfig::set(std::string_view key, std::string_view value) { find_field(key).set(*this, value); }

std::string RunConfig::get(std::string_view key) const { return find_field(key).get(*this); }

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::invalid_argument, "config: line " + std::to_string(number) + " is not 'key = value'");
    }
    base.set(trim(std::string_view(stripped).substr(0, eq)), trim(std::string_view(stripped).substr(eq + 1)));
  }
  return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& key : RunConfig::keys()) j[key] = cfg.get(key);
  return j.dump();
}

RunConfig config_from_json(std::string_view json) {
  const auto j = nlohmann::json::parse(json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(ErrorKind::io, "config: snapshot is not a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) fail(ErrorKind::io, "config: snapshot value for '" + key + "' is not a string");
    cfg.set(key, value.get<std::string>());
  }
  return cfg;
}

}  // namespace ipg
