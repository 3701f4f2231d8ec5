#ifndef PATHRANK_H
#define PATHRANK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  PR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PR_STATUS_NULL_POINTER = 1,
  /**
   * Bad input: unknown concept, malformed config, invalid sizes.
   */
  PR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File could not be read or written.
   */
  PR_STATUS_IO = 3,
  /**
   * The student already masters the targets; the effect is undefined.
   */
  PR_STATUS_DEGENERATE_EPISODE = 4,
  /**
   * Any other failure, including training divergence.
   */
  PR_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  PR_STATUS_PANIC = 6,
} PrStatus;

/**
 * Opaque trained recommender.
 */
typedef struct PrModel PrModel;

/**
 * Opaque synthetic world.
 */
typedef struct PrWorld PrWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pr_version(void);

/**
 * Builds a preset world ("prereq-chain", "random-sparse" or "two-cluster").
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
PrStatus pr_world_new(const char *preset, size_t num_concepts, uint64_t seed, PrWorld **out);

/**
 * Releases a world. Null is ignored.
 *
 * # Safety
 * `world` must come from [`pr_world_new`] and not be used afterwards.
 */
void pr_world_free(PrWorld *world);

/**
 * Number of concepts, or 0 for a null world.
 *
 * # Safety
 * `world` must be null or a live handle.
 */
size_t pr_world_num_concepts(const PrWorld *world);

/**
 * Simulates a student with the given history studying `path`, and writes
 * the normalized learning effect on `targets` to `out_effect`. When
 * `out_feedback` is non-null it receives `path_len` observed masteries.
 * `seed` drives the simulator noise, if any.
 *
 * # Safety
 * Array pointers must hold the stated number of elements.
 */
PrStatus pr_world_run_path(const PrWorld *world,
                           const size_t *history_concepts,
                           const double *history_mastery,
                           size_t history_len,
                           const size_t *path,
                           size_t path_len,
                           const size_t *targets,
                           size_t targets_len,
                           uint64_t seed,
                           double *out_effect,
                           double *out_feedback);

/**
 * Trains a recommender on `world`. `config_toml` holds optional [model] and
 * [train] sections; unknown keys are rejected. Any [world] section is
 * ignored in favor of the handle.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
PrStatus pr_model_train(const PrWorld *world, const char *config_toml, PrModel **out);

/**
 * Loads a JSON checkpoint written by [`pr_model_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
PrStatus pr_model_load(const char *path, PrModel **out);

/**
 * Writes the model as a JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
PrStatus pr_model_save(const PrModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void pr_model_free(PrModel *model);

/**
 * Number of concepts the model covers, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t pr_model_num_concepts(const PrModel *model);

/**
 * Greedy path of `path_len` distinct concepts drawn from `candidates`,
 * written to `out_path` in study order.
 *
 * # Safety
 * Array pointers must hold the stated number of elements; `out_path` must
 * have room for `path_len`.
 */
PrStatus pr_model_recommend(const PrModel *model,
                            const size_t *history_concepts,
                            const double *history_mastery,
                            size_t history_len,
                            const size_t *candidates,
                            size_t candidates_len,
                            const size_t *targets,
                            size_t targets_len,
                            size_t path_len,
                            size_t *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATHRANK_H */
