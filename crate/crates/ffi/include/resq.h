#ifndef RESQ_H
#define RESQ_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum ResqStatus {
  RESQ_STATUS_OK = 0,
  RESQ_STATUS_NULL_POINTER = 1,
  RESQ_STATUS_INVALID_ARGUMENT = 2,
  RESQ_STATUS_SHAPE_MISMATCH = 3,
  RESQ_STATUS_CONFIG = 4,
  RESQ_STATUS_FORMAT = 5,
  RESQ_STATUS_IO = 6,
  RESQ_STATUS_NUMERICAL = 7,
  RESQ_STATUS_BUFFER_TOO_SMALL = 8,
  RESQ_STATUS_PANIC = 9,
} ResqStatus;

/**
 * Verification suite selector for `resq_verify`.
 */
typedef enum ResqSuite {
  RESQ_SUITE_REPARAMETRIZATION = 0,
  RESQ_SUITE_ABSORPTION = 1,
  RESQ_SUITE_SYMMETRY = 2,
  RESQ_SUITE_ESCAPE = 3,
} ResqSuite;

/**
 * Opaque model handle.
 */
typedef struct ResqModel ResqModel;

typedef struct ResqParamCount {
  uint64_t total;
  uint64_t embedding;
  uint64_t non_embedding;
} ResqParamCount;

typedef struct ResqVerifyReport {
  uint32_t trials;
  uint32_t passing;
  uint32_t required;
  double max_deviation;
  double min_deviation;
  bool passed;
} ResqVerifyReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *resq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *resq_version(void);

/**
 * New model from `key = value` config text (unset keys take the toy
 * defaults; null means all defaults), initialized from `seed`.
 */
enum ResqStatus resq_model_new(const char *config_text, uint64_t seed, struct ResqModel **out);

/**
 * Loads a checkpoint. `f64` checkpoints are narrowed to `f32`.
 */
enum ResqStatus resq_model_load(const char *path, struct ResqModel **out);

enum ResqStatus resq_model_save(const struct ResqModel *model, const char *path);

/**
 * Frees a handle from `resq_model_new` or `resq_model_load`. Null is a no-op.
 */
void resq_model_free(struct ResqModel *model);

enum ResqStatus resq_model_vocab_size(const struct ResqModel *model, size_t *out);

enum ResqStatus resq_model_context_len(const struct ResqModel *model, size_t *out);

/**
 * Writes the model config as NUL-terminated text into `buf`. `needed`
 * receives the required size including the NUL; with a short `buf` the call
 * fails with `BUFFER_TOO_SMALL` and writes nothing.
 */
enum ResqStatus resq_model_config(const struct ResqModel *model,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

/**
 * Logits of one sequence of `n` tokens, written row-major as `n × vocab`
 * floats. `cap` is the length of `logits` in floats.
 */
enum ResqStatus resq_model_forward(const struct ResqModel *model,
                                   const uint32_t *tokens,
                                   size_t n,
                                   float *logits,
                                   size_t cap);

/**
 * Mean next-token cross-entropy (nats) of `targets` given `inputs`.
 */
enum ResqStatus resq_model_loss(const struct ResqModel *model,
                                const uint32_t *inputs,
                                const uint32_t *targets,
                                size_t n,
                                double *out);

enum ResqStatus resq_model_param_count(const struct ResqModel *model, struct ResqParamCount *out);

/**
 * Parameter counts of a config given as text, without building the model.
 */
enum ResqStatus resq_count_params(const char *config_text, struct ResqParamCount *out);

/**
 * Parameters of one residual bottleneck query map at width `d`.
 */
enum ResqStatus resq_ftheta_param_count(uint64_t d, uint64_t *out);

/**
 * `(baseline_loss - loss) / baseline_loss`.
 */
enum ResqStatus resq_relative_improvement(double baseline_loss, double loss, double *out);

/**
 * Runs one attention verification suite, `suite` being a `ResqSuite` value.
 * A suite that runs but misses its bound still returns `OK`, with
 * `passed = false` in the report.
 */
enum ResqStatus resq_verify(uint32_t suite,
                            uint64_t seed,
                            uint32_t trials,
                            uint32_t d,
                            uint32_t n_head,
                            uint32_t n,
                            struct ResqVerifyReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESQ_H */
