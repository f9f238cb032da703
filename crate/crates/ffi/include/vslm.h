#ifndef VSLM_H
#define VSLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum VslmStatus {
  VSLM_STATUS_OK = 0,
  VSLM_STATUS_NULL_POINTER = 1,
  VSLM_STATUS_INVALID_ARGUMENT = 2,
  VSLM_STATUS_NUMERIC = 3,
  VSLM_STATUS_INCOMPATIBLE = 4,
  VSLM_STATUS_IO = 5,
  VSLM_STATUS_PANIC = 6,
} VslmStatus;

/**
 * Synthetic utterances together with the corpus configuration.
 */
typedef struct VslmCorpus VslmCorpus;

/**
 * Token grid of `frames x n_q` codec tokens.
 */
typedef struct VslmGrid VslmGrid;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct VslmModel VslmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 *
 * The pointer stays valid until the next `vslm_` call on the same thread.
 */
const char *vslm_last_error_message(void);

/**
 * Generates `count` utterances of the default corpus configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum VslmStatus vslm_corpus_generate(uint64_t seed, size_t count, struct VslmCorpus **out);

/**
 * Reads a JSONL corpus written by `vslm gen-data`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VslmStatus vslm_corpus_load(const char *path, struct VslmCorpus **out);

/**
 * # Safety
 * `corpus` must be NULL or a handle from `vslm_corpus_generate`/`vslm_corpus_load` not yet freed.
 */
void vslm_corpus_free(struct VslmCorpus *corpus);

/**
 * Number of utterances; 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t vslm_corpus_len(const struct VslmCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle and `out` writable.
 */
enum VslmStatus vslm_corpus_video_frames(const struct VslmCorpus *corpus,
                                         size_t index,
                                         size_t *out);

/**
 * Ground-truth speech tokens of one utterance.
 *
 * # Safety
 * `corpus` must be a live handle and `out` writable.
 */
enum VslmStatus vslm_corpus_target(const struct VslmCorpus *corpus,
                                   size_t index,
                                   struct VslmGrid **out);

/**
 * Codec token of `phoneme` spoken by `speaker` at codebook `level`.
 *
 * # Safety
 * `corpus` must be a live handle and `out` writable.
 */
enum VslmStatus vslm_codec_encode(const struct VslmCorpus *corpus,
                                  size_t phoneme,
                                  size_t speaker,
                                  size_t level,
                                  uint32_t *out);

/**
 * Loads a checkpoint written by `vslm train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VslmStatus vslm_model_load(const char *path, struct VslmModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from `vslm_model_load` not yet freed.
 */
void vslm_model_free(struct VslmModel *model);

/**
 * Codebook levels per frame; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t vslm_model_n_q(const struct VslmModel *model);

/**
 * Whether the model predicts durations with its aligner (output length equals the video length).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
bool vslm_model_uses_aligner(const struct VslmModel *model);

/**
 * Generates speech for utterance `index` with top-`k` sampling.
 *
 * The sampler stream depends on `seed` and `index` only, matching `vslm infer`.
 *
 * # Safety
 * `model` and `corpus` must be live handles and `out` writable.
 */
enum VslmStatus vslm_generate(const struct VslmModel *model,
                              const struct VslmCorpus *corpus,
                              size_t index,
                              size_t k,
                              double temperature,
                              uint64_t seed,
                              struct VslmGrid **out);

/**
 * # Safety
 * `grid` must be NULL or a grid handle not yet freed.
 */
void vslm_grid_free(struct VslmGrid *grid);

/**
 * # Safety
 * `grid` must be NULL or a live handle.
 */
size_t vslm_grid_frames(const struct VslmGrid *grid);

/**
 * # Safety
 * `grid` must be NULL or a live handle.
 */
size_t vslm_grid_n_q(const struct VslmGrid *grid);

/**
 * Copies the frame-major tokens into `buf`, which must hold `frames * n_q` entries.
 *
 * # Safety
 * `grid` must be a live handle and `buf` valid for `len` writes.
 */
enum VslmStatus vslm_grid_copy_tokens(const struct VslmGrid *grid, uint32_t *buf, size_t len);

/**
 * Fraction of positions (over the longer grid) whose tokens all match.
 *
 * # Safety
 * Both grids must be live handles and `out` writable.
 */
enum VslmStatus vslm_token_accuracy(const struct VslmGrid *generated,
                                    const struct VslmGrid *target,
                                    double *out);

/**
 * Mel-cepstral distortion after dynamic time warping, on the corpus's decoded features.
 *
 * # Safety
 * All handles must be live and `out` writable.
 */
enum VslmStatus vslm_mcd_dtw(const struct VslmCorpus *corpus,
                             const struct VslmGrid *generated,
                             const struct VslmGrid *target,
                             double *out);

/**
 * `|generated - target| / target` frame-count error.
 *
 * # Safety
 * `out` must be writable.
 */
enum VslmStatus vslm_duration_error(size_t generated_frames, size_t target_frames, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VSLM_H */
