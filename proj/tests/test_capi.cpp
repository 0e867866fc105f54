#include <cstdlib>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "ipg/ipg.h"
#include "json.hpp"

namespace {

using json = nlohmann::json;

std::string take(char* s) {
  std::string out = s ? s : "";
  ipg_string_free(s);
  return out;
}

ipg_config* tiny_config(const char* mode) {
  ipg_config* cfg = nullptr;
  REQUIRE(ipg_config_create(&cfg) == IPG_OK);
  REQUIRE(ipg_config_parse(cfg,
                           "hidden = 16,8\nbatch_size = 32\nepochs = 2\nn_pairs = 20\n"
                           "train_size = 320\ntest_size = 100\n") == IPG_OK);
  REQUIRE(ipg_config_set(cfg, "mode", mode) == IPG_OK);
  return cfg;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("ipg_capi_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("library metadata") {
  CHECK(std::string(ipg_version()) == "1.0.0");
  CHECK(std::string(ipg_status_name(IPG_OK)) == "ok");
  CHECK(std::string(ipg_status_name(IPG_ERR_IO)) == "io");
  CHECK(ipg_config_key_count() > 20);
  CHECK(std::string(ipg_config_key(0)) == "mode");
  CHECK(ipg_config_key(100000) == nullptr);
}

TEST_CASE("config handles") {
  ipg_config* cfg = nullptr;
  REQUIRE(ipg_config_create(&cfg) == IPG_OK);
  char* value = nullptr;
  REQUIRE(ipg_config_get(cfg, "alpha", &value) == IPG_OK);
  CHECK(take(value) == "0.1");
  CHECK(ipg_config_set(cfg, "alpha", "0.3") == IPG_OK);
  REQUIRE(ipg_config_get(cfg, "alpha", &value) == IPG_OK);
  CHECK(take(value) == "0.3");

  CHECK(ipg_config_set(cfg, "no_such_key", "1") == IPG_ERR_INVALID_ARGUMENT);
  CHECK(std::string(ipg_last_error()).find("no_such_key") != std::string::npos);
  CHECK(ipg_config_set(cfg, "alpha", "2") == IPG_OK);
  CHECK(ipg_config_validate(cfg) == IPG_ERR_INVALID_ARGUMENT);
  CHECK(ipg_config_set(cfg, "alpha", "0.1") == IPG_OK);
  CHECK(ipg_config_validate(cfg) == IPG_OK);

  char* text = nullptr;
  REQUIRE(ipg_config_to_json(cfg, &text) == IPG_OK);
  const json j = json::parse(take(text));
  CHECK(j.is_object());

  CHECK(ipg_config_load("/nonexistent/cfg", &cfg) == IPG_ERR_IO);
  CHECK(ipg_config_get(nullptr, "alpha", &value) == IPG_ERR_INVALID_ARGUMENT);
  ipg_config_destroy(cfg);
  ipg_config_destroy(nullptr);
}

TEST_CASE("dataset handles") {
  ipg_config* cfg = tiny_config("erm");
  ipg_dataset* train = nullptr;
  REQUIRE(ipg_dataset_generate(cfg, "train", &train) == IPG_OK);
  CHECK(ipg_dataset_size(train) == 288);
  size_t counts[4];
  REQUIRE(ipg_dataset_group_counts(train, counts) == IPG_OK);
  CHECK(counts[0] + counts[1] + counts[2] + counts[3] == 288);

  const auto dir = scratch_dir("data");
  const std::string path = (dir / "train.ds").string();
  REQUIRE(ipg_dataset_save(train, path.c_str()) == IPG_OK);
  ipg_dataset* back = nullptr;
  REQUIRE(ipg_dataset_load(path.c_str(), &back) == IPG_OK);
  size_t back_counts[4];
  REQUIRE(ipg_dataset_group_counts(back, back_counts) == IPG_OK);
  for (int i = 0; i < 4; ++i) CHECK(back_counts[i] == counts[i]);

  ipg_dataset* bad = nullptr;
  CHECK(ipg_dataset_generate(cfg, "holdout", &bad) == IPG_ERR_INVALID_ARGUMENT);
  CHECK(ipg_dataset_load("/nonexistent.ds", &bad) == IPG_ERR_IO);
  ipg_dataset_destroy(back);
  ipg_dataset_destroy(train);
  ipg_config_destroy(cfg);
}

TEST_CASE("train, evaluate, save and export through the C API") {
  const auto dir = scratch_dir("train");
  ipg_config* cfg = tiny_config("ipg");
  REQUIRE(ipg_config_set(cfg, "output_dir", (dir / "run").string().c_str()) == IPG_OK);
  ipg_model* model = nullptr;
  char* summary = nullptr;
  REQUIRE(ipg_train(cfg, &model, &summary) == IPG_OK);
  const json s = json::parse(take(summary));
  CHECK(s.at("mode") == "ipg");
  CHECK(s.at("epochs") == 2);
  CHECK(s.at("pair_evaluations").get<int>() > 0);
  CHECK(std::filesystem::exists(dir / "run" / "metrics.csv"));
  CHECK(std::filesystem::exists(dir / "run" / "final.ckpt"));

  char* eval = nullptr;
  REQUIRE(ipg_model_evaluate(model, nullptr, nullptr, &eval) == IPG_OK);
  const json e = json::parse(take(eval));
  CHECK(e.at("split") == "test");
  CHECK(e.at("count") == 100);
  CHECK(e.at("worst_group_acc").get<double>() <= e.at("overall_acc").get<double>());

  char* metrics = nullptr;
  REQUIRE(ipg_model_metrics_json(model, &metrics) == IPG_OK);
  CHECK(json::parse(take(metrics)).size() == 6);

  const std::string ckpt = (dir / "copy.ckpt").string();
  REQUIRE(ipg_model_save(model, ckpt.c_str()) == IPG_OK);
  ipg_model* loaded = nullptr;
  REQUIRE(ipg_model_load(ckpt.c_str(), &loaded) == IPG_OK);
  char* eval2 = nullptr;
  REQUIRE(ipg_model_evaluate(loaded, nullptr, nullptr, &eval2) == IPG_OK);
  CHECK(json::parse(take(eval2)) == e);

  ipg_config* model_cfg = nullptr;
  REQUIRE(ipg_model_config(loaded, &model_cfg) == IPG_OK);
  char* mode = nullptr;
  REQUIRE(ipg_config_get(model_cfg, "mode", &mode) == IPG_OK);
  CHECK(take(mode) == "ipg");

  double centroid = -1;
  const std::string rcsv = (dir / "r.csv").string(), pcsv = (dir / "p.csv").string();
  REQUIRE(ipg_model_export_rationales(loaded, nullptr, 1, 30, 0, rcsv.c_str(), pcsv.c_str(), &centroid) == IPG_OK);
  CHECK(centroid >= 0.0);
  CHECK(centroid <= 1.0);
  CHECK(std::filesystem::exists(rcsv));
  CHECK(ipg_model_export_rationales(loaded, nullptr, 3, 0, 0, nullptr, nullptr, nullptr) == IPG_ERR_INVALID_ARGUMENT);

  ipg_model* missing = nullptr;
  CHECK(ipg_model_load((dir / "missing.ckpt").string().c_str(), &missing) == IPG_ERR_IO);
  CHECK(missing == nullptr);
  ipg_config_destroy(model_cfg);
  ipg_model_destroy(loaded);
  ipg_model_destroy(model);
  ipg_config_destroy(cfg);
}

TEST_CASE("gradcheck entry point") {
  char* report = nullptr;
  int passed = 0;
  REQUIRE(ipg_gradcheck(2, 1, &report, &passed) == IPG_OK);
  CHECK(passed == 1);
  CHECK(json::parse(take(report)).is_array());
}
