#ifndef ULAST_ULAST_H
#define ULAST_ULAST_H

/* C interface to the ulast library. Every call returns a status code; on a
 * failure ulast_last_error() describes it (thread-local, valid until the next
 * failing call on the same thread). Handles are opaque and owned by the
 * caller, who releases them with the matching *_free function. */

#include <stddef.h>
#include <stdint.h>

#if defined(ULAST_BUILDING_LIBRARY)
#define ULAST_API __attribute__((visibility("default")))
#else
#define ULAST_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  ULAST_OK = 0,
  ULAST_ERR_ARGUMENT = 1, /* null handle/pointer or bad argument */
  ULAST_ERR_CONFIG = 2,
  ULAST_ERR_SHAPE = 3,
  ULAST_ERR_CONTRACT = 4,
  ULAST_ERR_RANGE = 5,
  ULAST_ERR_NUMERIC = 6,
  ULAST_ERR_TRAINING = 7,
  ULAST_ERR_FORMAT = 8,
  ULAST_ERR_IO = 9,
  ULAST_ERR_INTERNAL = 10
} ulast_status;

typedef struct ulast_config ulast_config;
typedef struct ulast_model ulast_model;
typedef struct ulast_tracker ulast_tracker;

ULAST_API const char* ulast_last_error(void);
ULAST_API const char* ulast_status_name(int status);
ULAST_API const char* ulast_version(void);

/* ---- configuration ---- */
ULAST_API int ulast_config_default(ulast_config** out);
ULAST_API int ulast_config_load(const char* path, ulast_config** out);
ULAST_API int ulast_config_parse(const char* json_text, ulast_config** out);
ULAST_API int ulast_config_set_seed(ulast_config* cfg, uint64_t seed);
/* Writes the JSON snapshot into buf (NUL-terminated, truncated to cap);
 * *needed receives the full length including the terminator. */
ULAST_API int ulast_config_to_json(const ulast_config* cfg, char* buf, size_t cap, size_t* needed);
ULAST_API void ulast_config_free(ulast_config* cfg);

/* ---- models ---- */
/* Fresh weights from the configured seed, or the configured checkpoint when
 * one is set. */
ULAST_API int ulast_model_create(const ulast_config* cfg, ulast_model** out);
ULAST_API int ulast_model_load(const ulast_config* cfg, const char* path, ulast_model** out);
ULAST_API int ulast_model_save(const ulast_model* model, const ulast_config* cfg, const char* path, uint64_t step);
ULAST_API int ulast_model_param_count(const ulast_model* model, size_t* out);
ULAST_API void ulast_model_free(ulast_model* model);

/* ---- pipelines (write artifacts into out_dir, created if missing) ---- */
/* Synthetic sequences as PPM frames plus boxes.txt, one directory each. */
ULAST_API int ulast_generate_data(const ulast_config* cfg, const char* out_dir);
/* train_log.txt, metrics.jsonl, model.ulst (+ .json sidecar). On a training
 * failure the last good weights are saved as model.ulst before returning. */
ULAST_API int ulast_train(ulast_model* model, const ulast_config* cfg, const char* out_dir);
/* Tracks the held-out sequences: results.jsonl and metrics.json. */
ULAST_API int ulast_track(ulast_model* model, const ulast_config* cfg, const char* out_dir);
/* Scores a results.jsonl file against the held-out ground truth; writes
 * metrics.json. A NULL results_path means the config's "results" key, else
 * <out_dir>/results.jsonl. Metric pointers may be NULL. */
ULAST_API int ulast_evaluate(const ulast_config* cfg, const char* results_path, const char* out_dir,
                             double* mean_iou, double* success_auc, double* precision);
/* Writes gradcheck.json; *all_pass is 1 when every suite is within tolerance. */
ULAST_API int ulast_gradcheck(const char* out_dir, uint64_t seed, int* all_pass);
/* report.json and report.md for a named study. */
ULAST_API int ulast_run_study(const ulast_config* cfg, const char* study, const char* out_dir);

/* ---- online tracking ---- */
ULAST_API int ulast_tracker_create(ulast_model* model, const ulast_config* cfg, ulast_tracker** out);
/* image: planar CHW floats in [0, 1]; box: x1, y1, x2, y2 in pixels. */
ULAST_API int ulast_tracker_init(ulast_tracker* tracker, const float* image, size_t channels, size_t height,
                                 size_t width, const double box[4]);
ULAST_API int ulast_tracker_track(ulast_tracker* tracker, const float* image, size_t channels, size_t height,
                                  size_t width, double box_out[4], double* score_out);
ULAST_API void ulast_tracker_free(ulast_tracker* tracker);

#ifdef __cplusplus
}
#endif

#endif
