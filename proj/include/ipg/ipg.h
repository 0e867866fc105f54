#ifndef IPG_IPG_H
#define IPG_IPG_H

/* C interface to the invariance-guided training library.
 *
 * Every fallible call returns an ipg_status; on failure ipg_last_error()
 * holds a message for the calling thread until its next failing call.
 * Strings returned through char** are owned by the caller and released with
 * ipg_string_free. Handles are released with their matching _destroy. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(IPG_BUILDING_LIBRARY)
#define IPG_API __declspec(dllexport)
#else
#define IPG_API __declspec(dllimport)
#endif
#else
#define IPG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ipg_status {
  IPG_OK = 0,
  IPG_ERR_INVALID_ARGUMENT = 1,
  IPG_ERR_IO = 2,
  IPG_ERR_NUMERIC = 3,
  IPG_ERR_RUNTIME = 4
} ipg_status;

typedef struct ipg_config ipg_config;
typedef struct ipg_dataset ipg_dataset;
typedef struct ipg_model ipg_model;

IPG_API const char* ipg_version(void);
IPG_API const char* ipg_last_error(void);
IPG_API const char* ipg_status_name(ipg_status status);
IPG_API void ipg_string_free(char* str);

/* Run configuration as flat key/value pairs. */
IPG_API ipg_status ipg_config_create(ipg_config** out);
IPG_API ipg_status ipg_config_load(const char* path, ipg_config** out);
/* Applies `key = value` lines on top of the current values. */
IPG_API ipg_status ipg_config_parse(ipg_config* cfg, const char* text);
IPG_API ipg_status ipg_config_set(ipg_config* cfg, const char* key, const char* value);
IPG_API ipg_status ipg_config_get(const ipg_config* cfg, const char* key, char** out);
IPG_API ipg_status ipg_config_validate(const ipg_config* cfg);
IPG_API ipg_status ipg_config_to_json(const ipg_config* cfg, char** out);
IPG_API size_t ipg_config_key_count(void);
/* NULL when index is out of range. The string is static. */
IPG_API const char* ipg_config_key(size_t index);
IPG_API void ipg_config_destroy(ipg_config* cfg);

/* split is "train", "val" or "test"; the splits are a pure function of the config. */
IPG_API ipg_status ipg_dataset_generate(const ipg_config* cfg, const char* split, ipg_dataset** out);
IPG_API ipg_status ipg_dataset_save(const ipg_dataset* ds, const char* path);
IPG_API ipg_status ipg_dataset_load(const char* path, ipg_dataset** out);
IPG_API size_t ipg_dataset_size(const ipg_dataset* ds);
/* Counts in the order red/y=0, red/y=1, green/y=0, green/y=1. */
IPG_API ipg_status ipg_dataset_group_counts(const ipg_dataset* ds, size_t counts[4]);
IPG_API void ipg_dataset_destroy(ipg_dataset* ds);

/* Full training run. Writes metrics.csv and final.ckpt when output_dir is set.
 * out_model and out_summary_json may be NULL. */
IPG_API ipg_status ipg_train(const ipg_config* cfg, ipg_model** out_model, char** out_summary_json);

IPG_API ipg_status ipg_model_load(const char* checkpoint_path, ipg_model** out);
IPG_API ipg_status ipg_model_save(const ipg_model* model, const char* checkpoint_path);
IPG_API ipg_status ipg_model_config(const ipg_model* model, ipg_config** out);
/* Per-epoch metrics recorded during training, as a JSON array. */
IPG_API ipg_status ipg_model_metrics_json(const ipg_model* model, char** out);
/* Metrics row for a dataset; ds == NULL evaluates the test split rebuilt from the model's config. */
IPG_API ipg_status ipg_model_evaluate(const ipg_model* model, const ipg_dataset* ds, const char* split_name,
                                      char** out_json);
/* Rationales of examples with label class_filter (max_rows 0 = all) and their 2-D projection.
 * Either path may be NULL. out_centroid_accuracy (nullable) receives the nearest-centroid
 * accuracy for the spurious attribute on the projection. */
IPG_API ipg_status ipg_model_export_rationales(const ipg_model* model, const ipg_dataset* ds, int class_filter,
                                               size_t max_rows, uint64_t seed, const char* rationale_csv_path,
                                               const char* projection_csv_path, double* out_centroid_accuracy);
IPG_API void ipg_model_destroy(ipg_model* model);

/* Finite-difference checks; out_all_passed (nullable) is set to 1 when every entry is within tolerance. */
IPG_API ipg_status ipg_gradcheck(size_t trials_per_primitive, uint64_t seed, char** out_json, int* out_all_passed);

#ifdef __cplusplus
}
#endif

#endif /* IPG_IPG_H */
