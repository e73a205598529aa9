#ifndef MLERL_H
#define MLERL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Number of progress-marker stages; bit `i` of a marker mask is stage `i`.
#define MLERL_MARKER_STAGES 7

typedef enum MlerlMarkerMode {
  MLERL_MARKER_MODE_PLAIN = 0,
  MLERL_MARKER_MODE_NONCE = 1,
} MlerlMarkerMode;

typedef enum MlerlMode {
  MLERL_MODE_SCRATCH = 0,
  MLERL_MODE_IMPROVE = 1,
} MlerlMode;

typedef enum MlerlStatus {
  MLERL_STATUS_OK = 0,
  MLERL_STATUS_NULL_POINTER = 1,
  MLERL_STATUS_INVALID_ARGUMENT = 2,
  MLERL_STATUS_BUFFER_TOO_SMALL = 3,
  MLERL_STATUS_UNKNOWN_STATE = 4,
  MLERL_STATUS_IO = 5,
  MLERL_STATUS_FORMAT = 6,
  MLERL_STATUS_UPDATE = 7,
  MLERL_STATUS_PANIC = 8,
} MlerlStatus;

// Opaque factored softmax policy.
typedef struct MlerlPolicy MlerlPolicy;

// Opaque seeded ChaCha8 generator.
typedef struct MlerlRng MlerlRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mlerl_version(void);

// Message of the last failed call on this thread, or null. Release with
// [`mlerl_string_free`].
char *mlerl_last_error_message(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void mlerl_string_free(char *s);

struct MlerlRng *mlerl_rng_new(uint64_t seed);

// # Safety
// `rng` must be null or a handle from [`mlerl_rng_new`], freed once.
void mlerl_rng_free(struct MlerlRng *rng);

// # Safety
// `rng` and `out` must be valid pointers.
enum MlerlStatus mlerl_rng_next_u64(struct MlerlRng *rng, uint64_t *out);

// Single-state, single-slot policy over `n` placeholder actions.
//
// # Safety
// `logits` must point to `n` doubles; `out` must be valid.
enum MlerlStatus mlerl_policy_from_logits(const double *logits, size_t n, struct MlerlPolicy **out);

// Loads a policy file, or `policy.bin` inside a checkpoint directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid.
enum MlerlStatus mlerl_policy_load(const char *path, struct MlerlPolicy **out);

// # Safety
// `policy` must be valid; `path` must be a NUL-terminated string.
enum MlerlStatus mlerl_policy_save(const struct MlerlPolicy *policy, const char *path);

// # Safety
// `policy` must be null or a policy handle, freed once.
void mlerl_policy_free(struct MlerlPolicy *policy);

// # Safety
// `policy` must be valid or null.
size_t mlerl_policy_num_states(const struct MlerlPolicy *policy);

// # Safety
// `policy` must be valid or null.
size_t mlerl_policy_num_params(const struct MlerlPolicy *policy);

// # Safety
// `policy` must be valid or null.
uint64_t mlerl_policy_version(const struct MlerlPolicy *policy);

// Copies the parameter vector into `out` (capacity `cap`).
//
// # Safety
// `policy` must be valid; `out` must hold `cap` doubles.
enum MlerlStatus mlerl_policy_params(const struct MlerlPolicy *policy, double *out, size_t cap);

// Index of the `(task_id, mode)` state.
//
// # Safety
// `policy` and `out` must be valid; `task_id` must be a NUL-terminated string.
enum MlerlStatus mlerl_policy_state_index(const struct MlerlPolicy *policy,
                                          const char *task_id,
                                          enum MlerlMode mode,
                                          size_t *out);

// Number of slots (independent choices) of a state.
//
// # Safety
// `policy` and `out` must be valid.
enum MlerlStatus mlerl_policy_num_slots(const struct MlerlPolicy *policy,
                                        size_t state,
                                        size_t *out);

// Draws one action for `state` at `temperature`. Writes the slot choices
// to `action` (capacity `cap`), their count to `out_len` and the summed
// log-probability to `out_logprob`.
//
// # Safety
// All pointers must be valid; `action` must hold `cap` elements.
enum MlerlStatus mlerl_policy_sample(const struct MlerlPolicy *policy,
                                     size_t state,
                                     double temperature,
                                     struct MlerlRng *rng,
                                     size_t *action,
                                     size_t cap,
                                     size_t *out_len,
                                     double *out_logprob);

// Log-probability of `action` in `state` at `temperature`.
//
// # Safety
// `policy` and `out` must be valid; `action` must hold `n` elements.
enum MlerlStatus mlerl_policy_log_prob(const struct MlerlPolicy *policy,
                                       size_t state,
                                       const size_t *action,
                                       size_t n,
                                       double temperature,
                                       double *out);

// Adds `scale * d log pi(action | state) / d theta` into `grad`, a vector of
// `mlerl_policy_num_params` doubles.
//
// # Safety
// `policy` must be valid; `action` must hold `n` elements and `grad` `cap`.
enum MlerlStatus mlerl_policy_accumulate_grad(const struct MlerlPolicy *policy,
                                              size_t state,
                                              const size_t *action,
                                              size_t n,
                                              double scale,
                                              double *grad,
                                              size_t cap);

// Global-norm clip at `grad_clip` (disabled when `<= 0`), then
// `theta -= lr * g`. Writes the pre-clip norm to `out_norm` when non-null.
//
// # Safety
// `policy` must be valid; `grad` must hold `n` doubles.
enum MlerlStatus mlerl_policy_apply_update(struct MlerlPolicy *policy,
                                           const double *grad,
                                           size_t n,
                                           double lr,
                                           double grad_clip,
                                           double *out_norm);

// Renders an action as the program it stands for. Release `out_code` with
// [`mlerl_string_free`].
//
// # Safety
// `policy` and `out_code` must be valid; `action` must hold `n` elements.
enum MlerlStatus mlerl_policy_render_code(const struct MlerlPolicy *policy,
                                          size_t state,
                                          const size_t *action,
                                          size_t n,
                                          char **out_code);

// Per-sample duration weights `max(dt, floor) / mean(max(dt, floor))`,
// clamped to `[clamp_lo, clamp_hi]` unless either bound is NaN. All ones
// when `enabled` is false.
//
// # Safety
// `durations` and `out` must each hold `n` doubles.
enum MlerlStatus mlerl_duration_weights(const double *durations,
                                        size_t n,
                                        bool enabled,
                                        double floor,
                                        double clamp_lo,
                                        double clamp_hi,
                                        double *out);

// Expected completions per action inside a window of `window` seconds
// shared by `workers` workers.
//
// # Safety
// `probs`, `durations` and `out` must each hold `n` doubles.
enum MlerlStatus mlerl_frequency_law(const double *probs,
                                     const double *durations,
                                     size_t n,
                                     double window,
                                     size_t workers,
                                     double *out);

// Reward of an invalid run that emitted `matched` distinct markers.
double mlerl_invalid_reward(uint32_t matched);

// Maps a grader score to a reward; lower-is-better scores are negated.
//
// # Safety
// `out` must be valid.
enum MlerlStatus mlerl_sign_adjust(double raw_score, bool lower_is_better, double *out);

// Parses progress markers from program stdout. Bit `i` of `out_mask` is set
// when stage `i` was seen.
//
// # Safety
// `stdout_text` must be a NUL-terminated string; `out_mask` must be valid.
enum MlerlStatus mlerl_parse_markers(const char *stdout_text,
                                     enum MlerlMarkerMode mode,
                                     uint64_t nonce,
                                     uint32_t *out_mask);

// Neutralises marker emissions in program source. Release `out_code` with
// [`mlerl_string_free`].
//
// # Safety
// `code` must be a NUL-terminated string; `out_code` must be valid.
enum MlerlStatus mlerl_sanitize(const char *code,
                                enum MlerlMarkerMode mode,
                                uint64_t nonce,
                                char **out_code);

// Stage name for bit `stage` of a marker mask, or null when out of range.
// The string is static.
const char *mlerl_marker_stage_name(uint32_t stage);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLERL_H */
