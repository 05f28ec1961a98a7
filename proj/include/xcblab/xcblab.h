/* C interface to the xcblab core.
 *
 * Every function returns a status code; on failure the handle and string
 * outputs are left untouched and xcblab_last_error() carries a diagnostic
 * for the calling thread. Strings returned through char** outputs are
 * heap-allocated and must be released with xcblab_string_free; handles have
 * their own _free functions. Handles are not thread-safe; distinct handles
 * may be used from distinct threads.
 *
 * Configs and reports cross the boundary as JSON text so callers never
 * depend on struct layout. xcblab_default_config_json documents the full
 * key set.
 */

#ifndef XCBLAB_H
#define XCBLAB_H

#include <stdint.h>

#if defined(_WIN32)
#if defined(XCBLAB_BUILD)
#define XCBLAB_API __declspec(dllexport)
#else
#define XCBLAB_API __declspec(dllimport)
#endif
#else
#define XCBLAB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum xcblab_status {
    XCBLAB_OK = 0,
    XCBLAB_ERR_CONTRACT = 1, /* precondition or shape violation */
    XCBLAB_ERR_NUMERIC = 2,  /* divergence or non-finite values */
    XCBLAB_ERR_PARSE = 3,    /* malformed JSON or checkpoint */
    XCBLAB_ERR_IO = 4,       /* filesystem failure */
    XCBLAB_ERR_INTERNAL = 5  /* anything else */
} xcblab_status;

typedef struct xcblab_dataset xcblab_dataset;
typedef struct xcblab_model xcblab_model;

XCBLAB_API const char* xcblab_version(void);

/* Message from the most recent failing call on this thread ("" if none).
 * The pointer stays valid until the next xcblab call on the same thread. */
XCBLAB_API const char* xcblab_last_error(void);

/* Caps the worker pool; n < 1 resets to the hardware default. Results are
 * identical for any thread count. */
XCBLAB_API void xcblab_set_threads(int n);

XCBLAB_API void xcblab_string_free(char* s);

/* ---- Shapes data ---- */

XCBLAB_API xcblab_status xcblab_dataset_generate(int64_t n, uint64_t seed, int32_t resolution,
                                                 int32_t shortcut, double noisy_frac,
                                                 int32_t redundant, xcblab_dataset** out);
XCBLAB_API xcblab_status xcblab_dataset_save(const xcblab_dataset* data, const char* dir);
XCBLAB_API xcblab_status xcblab_dataset_load(const char* dir, xcblab_dataset** out);
/* {"n", "resolution", "vocab_size", "vocab_real", "mean_tokens", "max_tokens"} */
XCBLAB_API xcblab_status xcblab_dataset_info_json(const xcblab_dataset* data, char** out_json);
XCBLAB_API void xcblab_dataset_free(xcblab_dataset* data);

/* ---- Models ---- */

/* Fully populated {"model": {...}, "train": {...}} for a given kind
 * ("standard", "cbm" or "xcb"); the starting point for config merging. */
XCBLAB_API xcblab_status xcblab_default_config_json(const char* kind, char** out_json);

XCBLAB_API xcblab_status xcblab_model_create(const char* model_config_json, uint64_t seed,
                                             xcblab_model** out);
XCBLAB_API xcblab_status xcblab_model_load(const char* checkpoint_path, xcblab_model** out);
XCBLAB_API xcblab_status xcblab_model_save(const xcblab_model* model, const char* checkpoint_path);
XCBLAB_API xcblab_status xcblab_model_config_json(const xcblab_model* model, char** out_json);
XCBLAB_API void xcblab_model_free(xcblab_model* model);

/* ---- Training and evaluation ---- */

/* Splits the dataset 75/15/10 with split_seed, trains on the train split
 * with early stopping on val, and restores the best weights. When run_dir is
 * non-NULL and nonempty the run artifacts (config.json, log.csv, best.ckpt,
 * timings.json) are written there. out_model and out_summary_json are each
 * optional; the summary carries best_epoch, best_val_loss, epochs_run,
 * early_stopped, mean_epoch_seconds and total_seconds. */
XCBLAB_API xcblab_status xcblab_train(const xcblab_dataset* data, const char* model_config_json,
                                      const char* train_config_json, uint64_t split_seed,
                                      uint64_t seed, const char* run_dir, xcblab_model** out_model,
                                      char** out_summary_json);

/* Scores the test split of the split_seed split. metrics is a comma list
 * drawn from {"f1", "dci"}; DCI regressors fit on the train split. */
XCBLAB_API xcblab_status xcblab_eval(const xcblab_model* model, const xcblab_dataset* data,
                                     uint64_t split_seed, const char* metrics, char** out_json);

/* Single-toggle ablation table over the train config's seed list, all cells
 * sharing the split_seed split. Returns the CSV; out_json optionally carries
 * the same rows as structured data. */
XCBLAB_API xcblab_status xcblab_ablate(const xcblab_dataset* data, const char* model_config_json,
                                       const char* train_config_json, uint64_t split_seed,
                                       char** out_csv, char** out_json);

/* Shortcut robustness protocol: trains standard and xcb models on
 * glyph-stamped train/val splits for every seed in the train config, scores
 * both on the clean test split, and measures corner attribution shares on
 * stamped test images. Returns per-seed CSV rows; out_json adds medians and
 * the epoch-time ratio. */
XCBLAB_API xcblab_status xcblab_robustness(const xcblab_dataset* data,
                                           const char* model_config_json,
                                           const char* train_config_json, int64_t ig_steps,
                                           int64_t ig_images, char** out_csv, char** out_json);

/* ---- Interpretability ---- */

/* Concept report: per bottleneck factor, the top_k attended tokens with
 * psi scores and the ids of the examples that activate the factor. */
XCBLAB_API xcblab_status xcblab_concepts(const xcblab_model* model, const xcblab_dataset* data,
                                         int64_t top_k, char** out_json);

/* Integrated gradients for one example. target_class < 0 attributes the
 * predicted class; stamp_shortcut != 0 stamps the label glyph first. When
 * out_dir is non-NULL writes ig_<id>.pgm and ig_<id>.csv there. The JSON
 * reports the corner share and the completeness gap. */
XCBLAB_API xcblab_status xcblab_attribute(const xcblab_model* model, const xcblab_dataset* data,
                                          int64_t index, int64_t steps, int64_t target_class,
                                          int32_t stamp_shortcut, const char* out_dir,
                                          char** out_json);

/* Generates num_questions survey questions from the model's concept report
 * (top_k tokens per factor). */
XCBLAB_API xcblab_status xcblab_survey_generate(const xcblab_model* model,
                                                const xcblab_dataset* data, int64_t top_k,
                                                int64_t num_questions, uint64_t seed,
                                                char** out_json);

/* answers_json is an array of option indices (or {"answers": [...]})
 * matching questions_json; XScore is the mean of 1 - psi over selections. */
XCBLAB_API xcblab_status xcblab_survey_score(const char* questions_json, const char* answers_json,
                                             double* out_xscore);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* XCBLAB_H */
