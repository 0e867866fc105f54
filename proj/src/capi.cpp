#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "ipg/error.hpp"
#include "ipg/harness.hpp"
#include "ipg/ipg.h"
#include "json.hpp"

struct ipg_config {
  ipg::RunConfig value;
};

struct ipg_dataset {
  ipg::GroupedDataset value;
};

struct ipg_model {
  ipg::Checkpoint ckpt;
};

namespace {

thread_local std::string last_error;

ipg_status status_of(ipg::ErrorKind kind) {
  switch (kind) {
    case ipg::ErrorKind::invalid_argument: return IPG_ERR_INVALID_ARGUMENT;
    case ipg::ErrorKind::io: return IPG_ERR_IO;
    case ipg::ErrorKind::numeric: return IPG_ERR_NUMERIC;
    case ipg::ErrorKind::runtime: return IPG_ERR_RUNTIME;
  }
  return IPG_ERR_RUNTIME;
}

ipg_status fail_with(ipg_status status, std::string message) {
  last_error = std::move(message);
  return status;
}

template <typename Fn>
ipg_status guarded(Fn&& fn) noexcept {
  try {
    fn();
    return IPG_OK;
  } catch (const ipg::Error& e) {
    return fail_with(status_of(e.kind()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail_with(IPG_ERR_IO, std::string("malformed JSON: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail_with(IPG_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail_with(IPG_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail_with(IPG_ERR_RUNTIME, "unknown exception");
  }
}

void require(const void* ptr, const char* what) {
  if (ptr == nullptr) ipg::fail(ipg::ErrorKind::invalid_argument, std::string(what) + " must not be NULL");
}

char* duplicate(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void check_split_name(std::string_view name) {
  if (name != "train" && name != "val" && name != "test") {
    ipg::fail(ipg::ErrorKind::invalid_argument, "split must be train, val or test, got '" + std::string(name) + "'");
  }
}

const ipg::GroupedDataset& pick_split(const ipg::Splits& splits, std::string_view name) {
  check_split_name(name);
  if (name == "train") return splits.train;
  if (name == "val") return splits.val;
  return splits.test;
}

ipg::Network network_of(const ipg::Checkpoint& ckpt) { return ipg::Network(ckpt.config.arch, ckpt.params); }

ipg::GroupedDataset default_test_split(const ipg::RunConfig& cfg) {
  return std::move(ipg::build_splits(cfg.data, cfg.seed).test);
}

nlohmann::ordered_json metrics_array(const std::vector<ipg::MetricsRow>& rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& row : rows) out.push_back(nlohmann::ordered_json::parse(ipg::metrics_json(row)));
  return out;
}

}  // namespace

extern "C" {

const char* ipg_version(void) { return "1.0.0"; }

const char* ipg_last_error(void) { return last_error.c_str(); }

const char* ipg_status_name(ipg_status status) {
  switch (status) {
    case IPG_OK: return "ok";
    case IPG_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case IPG_ERR_IO: return "io";
    case IPG_ERR_NUMERIC: return "numeric";
    case IPG_ERR_RUNTIME: return "runtime";
  }
  return "unknown";
}

void ipg_string_free(char* str) { std::free(str); }

ipg_status ipg_config_create(ipg_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new ipg_config{};
  });
}

ipg_status ipg_config_load(const char* path, ipg_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new ipg_config{ipg::load_config_file(path)};
  });
}

ipg_status ipg_config_parse(ipg_config* cfg, const char* text) {
  return guarded([&] {
    require(cfg, "cfg");
    require(text, "text");
    cfg->value = ipg::parse_config(text, cfg->value);
  });
}

ipg_status ipg_config_set(ipg_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    cfg->value.set(key, value);
  });
}

ipg_status ipg_config_get(const ipg_config* cfg, const char* key, char** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(out, "out");
    *out = duplicate(cfg->value.get(key));
  });
}

ipg_status ipg_config_validate(const ipg_config* cfg) {
  return guarded([&] {
    require(cfg, "cfg");
    cfg->value.validate();
  });
}

ipg_status ipg_config_to_json(const ipg_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = duplicate(ipg::config_to_json(cfg->value));
  });
}

size_t ipg_config_key_count(void) { return ipg::RunConfig::keys().size(); }

const char* ipg_config_key(size_t index) {
  const auto& keys = ipg::RunConfig::keys();
  return index < keys.size() ? keys[index].c_str() : nullptr;
}

void ipg_config_destroy(ipg_config* cfg) { delete cfg; }

ipg_status ipg_dataset_generate(const ipg_config* cfg, const char* split, ipg_dataset** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(split, "split");
    require(out, "out");
    check_split_name(split);
    ipg::Splits splits = ipg::build_splits(cfg->value.data, cfg->value.seed);
    *out = new ipg_dataset{pick_split(splits, split)};
  });
}

ipg_status ipg_dataset_save(const ipg_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds, "ds");
    require(path, "path");
    ipg::save_dataset(ds->value, path);
  });
}

ipg_status ipg_dataset_load(const char* path, ipg_dataset** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new ipg_dataset{ipg::load_dataset(path)};
  });
}

size_t ipg_dataset_size(const ipg_dataset* ds) { return ds ? ds->value.size() : 0; }

ipg_status ipg_dataset_group_counts(const ipg_dataset* ds, size_t counts[4]) {
  return guarded([&] {
    require(ds, "ds");
    require(counts, "counts");
    const auto c = ds->value.group_counts();
    for (std::size_t g = 0; g < c.size(); ++g) counts[g] = c[g];
  });
}

void ipg_dataset_destroy(ipg_dataset* ds) { delete ds; }

ipg_status ipg_train(const ipg_config* cfg, ipg_model** out_model, char** out_summary_json) {
  return guarded([&] {
    require(cfg, "cfg");
    cfg->value.validate();
    ipg::Trainer trainer(cfg->value);
    trainer.run();
    if (!cfg->value.output_dir.empty()) ipg::write_run_outputs(trainer, cfg->value.output_dir);
    if (out_summary_json) {
      nlohmann::ordered_json summary;
      summary["mode"] = ipg::mode_name(cfg->value.ipg.mode);
      summary["seed"] = cfg->value.seed;
      summary["epochs"] = trainer.epoch();
      summary["steps"] = trainer.global_step();
      summary["pair_evaluations"] = trainer.pair_evaluations();
      summary["selected_epoch"] = trainer.selected_epoch();
      summary["metrics"] = metrics_array(trainer.metrics());
      *out_summary_json = duplicate(summary.dump());
    }
    if (out_model) *out_model = new ipg_model{trainer.checkpoint()};
  });
}

ipg_status ipg_model_load(const char* checkpoint_path, ipg_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    *out = new ipg_model{ipg::load_checkpoint(checkpoint_path)};
  });
}

ipg_status ipg_model_save(const ipg_model* model, const char* checkpoint_path) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_path, "checkpoint_path");
    ipg::save_checkpoint(checkpoint_path, model->ckpt);
  });
}

ipg_status ipg_model_config(const ipg_model* model, ipg_config** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = new ipg_config{model->ckpt.config};
  });
}

ipg_status ipg_model_metrics_json(const ipg_model* model, char** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = duplicate(metrics_array(ipg::metrics_from_state(model->ckpt.state_json)).dump());
  });
}

ipg_status ipg_model_evaluate(const ipg_model* model, const ipg_dataset* ds, const char* split_name,
                              char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    const ipg::Network net = network_of(model->ckpt);
    ipg::MetricsRow row;
    row.split = split_name ? split_name : (ds ? "dataset" : "test");
    // Training telemetry of the last recorded epoch travels with the row.
    const auto history = ipg::metrics_from_state(model->ckpt.state_json);
    if (!history.empty()) {
      row.epoch = history.back().epoch;
      row.mean_d = history.back().mean_d;
      row.mean_c = history.back().mean_c;
      row.violation_rate = history.back().violation_rate;
    }
    row.eval = ds ? ipg::evaluate(net, ds->value) : ipg::evaluate(net, default_test_split(model->ckpt.config));
    *out_json = duplicate(ipg::metrics_json(row));
  });
}

ipg_status ipg_model_export_rationales(const ipg_model* model, const ipg_dataset* ds, int class_filter,
                                       size_t max_rows, uint64_t seed, const char* rationale_csv_path,
                                       const char* projection_csv_path, double* out_centroid_accuracy) {
  return guarded([&] {
    require(model, "model");
    if (class_filter != 0 && class_filter != 1) {
      ipg::fail(ipg::ErrorKind::invalid_argument, "class_filter must be 0 or 1");
    }
    const ipg::Network net = network_of(model->ckpt);
    const ipg::RationaleTable table =
        ds ? ipg::export_rationales(net, ds->value, class_filter, max_rows, seed)
           : ipg::export_rationales(net, default_test_split(model->ckpt.config), class_filter, max_rows, seed);
    if (rationale_csv_path) ipg::write_rationale_csv(table, rationale_csv_path);
    if (projection_csv_path || out_centroid_accuracy) {
      const ipg::Projection proj = ipg::project_2d(table.rows);
      if (projection_csv_path) ipg::write_projection_csv(proj, table, projection_csv_path);
      if (out_centroid_accuracy) *out_centroid_accuracy = ipg::nearest_centroid_accuracy(proj.coords, table.a);
    }
  });
}

void ipg_model_destroy(ipg_model* model) { delete model; }

ipg_status ipg_gradcheck(size_t trials_per_primitive, uint64_t seed, char** out_json, int* out_all_passed) {
  return guarded([&] {
    const auto entries = ipg::run_gradcheck(trials_per_primitive, seed);
    bool all = true;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      all = all && e.passed();
      j.push_back({{"name", e.name}, {"max_error", e.max_error}, {"tolerance", e.tolerance}, {"passed", e.passed()}});
    }
    if (out_json) *out_json = duplicate(j.dump());
    if (out_all_passed) *out_all_passed = all ? 1 : 0;
  });
}

}  // extern "C"
