// Command-line front end over the C interface.
//
// Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime or I/O failure.

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ipg/ipg.h"

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int code;
};

int exit_code_for(ipg_status status) { return status == IPG_ERR_INVALID_ARGUMENT ? kExitInvalid : kExitRuntime; }

void check(ipg_status status, const char* what) {
  if (status == IPG_OK) return;
  std::fprintf(stderr, "ipg: %s failed (%s): %s\n", what, ipg_status_name(status), ipg_last_error());
  throw Failure{exit_code_for(status)};
}

template <typename T, void (*Destroy)(T*)>
struct Deleter {
  void operator()(T* p) const { Destroy(p); }
};
using ConfigPtr = std::unique_ptr<ipg_config, Deleter<ipg_config, ipg_config_destroy>>;
using DatasetPtr = std::unique_ptr<ipg_dataset, Deleter<ipg_dataset, ipg_dataset_destroy>>;
using ModelPtr = std::unique_ptr<ipg_model, Deleter<ipg_model, ipg_model_destroy>>;

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { ipg_string_free(ptr); }
};

// Config file plus `--<key> value` overrides for every configuration key.
struct ConfigOptions {
  std::string file;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", file, "key = value configuration file")->check(CLI::ExistingFile);
    for (std::size_t i = 0; i < ipg_config_key_count(); ++i) {
      const std::string key = ipg_config_key(i);
      cmd.add_option("--" + key, overrides[key], "override '" + key + "'");
    }
  }

  ConfigPtr build(const CLI::App& cmd) const {
    ipg_config* raw = nullptr;
    if (file.empty()) {
      check(ipg_config_create(&raw), "config");
    } else {
      check(ipg_config_load(file.c_str(), &raw), "loading config");
    }
    ConfigPtr cfg(raw);
    for (const auto& [key, value] : overrides) {
      if (cmd.count("--" + key) == 0) continue;
      check(ipg_config_set(cfg.get(), key.c_str(), value.c_str()), ("--" + key).c_str());
    }
    check(ipg_config_validate(cfg.get()), "config validation");
    return cfg;
  }
};

ModelPtr load_model(const std::string& path) {
  ipg_model* raw = nullptr;
  check(ipg_model_load(path.c_str(), &raw), "loading checkpoint");
  return ModelPtr(raw);
}

DatasetPtr load_optional_dataset(const std::string& path) {
  if (path.empty()) return nullptr;
  ipg_dataset* raw = nullptr;
  check(ipg_dataset_load(path.c_str(), &raw), "loading dataset");
  return DatasetPtr(raw);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariance-guided training on ColoredMNIST"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Build the train/val/test splits and write them to disk");
  ConfigOptions gen_cfg;
  gen_cfg.attach(*gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model; writes metrics.csv and final.ckpt");
  ConfigOptions train_cfg;
  train_cfg.attach(*train);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and print metrics as JSON");
  std::string eval_ckpt, eval_data, eval_split;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--dataset", eval_data, "Dataset file; defaults to the test split of the checkpoint config");
  eval->add_option("--split-name", eval_split, "Label for the split column");

  auto* exp = app.add_subcommand("export-rationales", "Write rationale matrices and their 2-D projection");
  std::string exp_ckpt, exp_data, exp_csv, exp_proj;
  int exp_class = 1;
  std::size_t exp_rows = 0;
  std::uint64_t exp_seed = 0;
  exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required();
  exp->add_option("--dataset", exp_data, "Dataset file; defaults to the test split of the checkpoint config");
  exp->add_option("--class", exp_class, "Label to keep")->check(CLI::Range(0, 1));
  exp->add_option("--max-rows", exp_rows, "Row limit, 0 for all");
  exp->add_option("--sample-seed", exp_seed, "Seed for row sampling");
  exp->add_option("--out", exp_csv, "Rationale CSV path")->required();
  exp->add_option("--projection", exp_proj, "Projection CSV path");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every gradient");
  std::size_t grad_trials = 20;
  std::uint64_t grad_seed = 1;
  grad->add_option("--trials", grad_trials, "Trials per primitive")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*gen) {
      const ConfigPtr cfg = gen_cfg.build(*gen);
      std::error_code ec;
      std::filesystem::create_directories(gen_out, ec);
      if (ec) {
        std::fprintf(stderr, "ipg: cannot create %s: %s\n", gen_out.c_str(), ec.message().c_str());
        return kExitRuntime;
      }
      for (const char* split : {"train", "val", "test"}) {
        ipg_dataset* raw = nullptr;
        check(ipg_dataset_generate(cfg.get(), split, &raw), "generating data");
        const DatasetPtr ds(raw);
        const std::string path = gen_out + "/" + split + ".ds";
        check(ipg_dataset_save(ds.get(), path.c_str()), "writing dataset");
        std::printf("%s: %zu examples -> %s\n", split, ipg_dataset_size(ds.get()), path.c_str());
      }
    } else if (*train) {
      const ConfigPtr cfg = train_cfg.build(*train);
      OwnedString summary;
      check(ipg_train(cfg.get(), nullptr, &summary.ptr), "training");
      std::printf("%s\n", summary.ptr);
    } else if (*eval) {
      const ModelPtr model = load_model(eval_ckpt);
      const DatasetPtr ds = load_optional_dataset(eval_data);
      OwnedString json;
      check(ipg_model_evaluate(model.get(), ds.get(), eval_split.empty() ? nullptr : eval_split.c_str(), &json.ptr),
            "evaluation");
      std::printf("%s\n", json.ptr);
    } else if (*exp) {
      const ModelPtr model = load_model(exp_ckpt);
      const DatasetPtr ds = load_optional_dataset(exp_data);
      double centroid = 0.0;
      check(ipg_model_export_rationales(model.get(), ds.get(), exp_class, exp_rows, exp_seed, exp_csv.c_str(),
                                        exp_proj.empty() ? nullptr : exp_proj.c_str(), &centroid),
            "exporting rationales");
      std::printf("{\"centroid_accuracy\":%.6f}\n", centroid);
    } else if (*grad) {
      OwnedString json;
      int passed = 0;
      check(ipg_gradcheck(grad_trials, grad_seed, &json.ptr, &passed), "gradcheck");
      std::printf("%s\n", json.ptr);
      if (!passed) {
        std::fprintf(stderr, "ipg: gradcheck tolerance exceeded\n");
        return kExitRuntime;
      }
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
