/* C interface to the VQA attribution engine (vqa-interp-ffi).
 *
 * Handles are opaque; create them with the _load functions and release
 * them with the matching _free. Fallible calls return a ViStatus; on
 * failure, vi_last_error copies a thread-local description. Score buffers
 * are caller-owned: pass their capacity in floats, and the call fails with
 * VI_STATUS_BUFFER_TOO_SMALL if the result does not fit.
 */

#ifndef VQA_INTERP_H
#define VQA_INTERP_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ViStatus {
  VI_STATUS_OK = 0,
  VI_STATUS_NULL_ARGUMENT = 1,
  VI_STATUS_INVALID_ARGUMENT = 2,
  VI_STATUS_IO_ERROR = 3,
  VI_STATUS_PARSE_ERROR = 4,
  /* Checkpoint and dataset disagree on vocabulary or answer inventory. */
  VI_STATUS_MISMATCH = 5,
  VI_STATUS_BUFFER_TOO_SMALL = 6,
  VI_STATUS_PANIC = 7,
} ViStatus;

typedef enum ViMethod {
  VI_METHOD_GUIDED = 0,
  VI_METHOD_OCCLUSION = 1,
  VI_METHOD_RANDOM = 2,
} ViMethod;

typedef struct ViModel ViModel;
typedef struct ViDataset ViDataset;

/* Copies the last error message (NUL-terminated, truncating) into buf and
 * returns the full message length in bytes excluding the terminator. buf
 * may be NULL to query the length only. */
size_t vi_last_error(char *buf, size_t capacity);

/* Model checkpoints. */
ViStatus vi_model_load(const char *path, ViModel **out);
void vi_model_free(ViModel *model);
size_t vi_model_vocab_size(const ViModel *model);
size_t vi_model_answer_count(const ViModel *model);

/* JSON-lines datasets. */
ViStatus vi_dataset_load(const char *path, ViDataset **out);
void vi_dataset_free(ViDataset *dataset);
size_t vi_dataset_len(const ViDataset *dataset);

/* Argmax answer and its probability for one example. out_answer and
 * out_prob may be NULL to skip either. */
ViStatus vi_predict(const ViModel *model, const ViDataset *dataset,
                    size_t index, size_t *out_answer, float *out_prob);

/* Image importance map for one example, written row-major into out_scores.
 * All methods produce maps on the 16x16 occlusion grid; seed only affects
 * the random baseline. */
ViStatus vi_attribute_image(const ViModel *model, const ViDataset *dataset,
                            size_t index, ViMethod method, uint64_t seed,
                            float *out_scores, size_t capacity,
                            size_t *out_rows, size_t *out_cols);

/* Per-token word importance (guided or occlusion only). */
ViStatus vi_attribute_words(const ViModel *model, const ViDataset *dataset,
                            size_t index, ViMethod method, float *out_scores,
                            size_t capacity, size_t *out_len);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VQA_INTERP_H */
