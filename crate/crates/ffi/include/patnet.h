#ifndef PATNET_H
#define PATNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum PatnetStatus {
  PATNET_STATUS_OK = 0,
  PATNET_STATUS_NULL_POINTER = 1,
  PATNET_STATUS_INVALID_ARGUMENT = 2,
  PATNET_STATUS_UNKNOWN_VARIANT = 3,
  PATNET_STATUS_IO = 4,
  PATNET_STATUS_BAD_WEIGHTS = 5,
  PATNET_STATUS_SHAPE = 6,
  PATNET_STATUS_ALREADY_FUSED = 7,
  PATNET_STATUS_BUFFER_TOO_SMALL = 8,
  PATNET_STATUS_PANIC = 9,
} PatnetStatus;

// Opaque model handle.
typedef struct PatnetModel PatnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *patnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *patnet_version(void);

// Creates a model of `variant` ("T0" to "L") with seeded random weights for
// square `input_size` inputs (a multiple of 32).
//
// # Safety
// `variant` must be a NUL-terminated string and `out` a valid pointer.
enum PatnetStatus patnet_model_init(const char *variant,
                                    uint32_t input_size,
                                    uint64_t seed,
                                    struct PatnetModel **out);

// Loads a weight file; the variant, input size and fused state are inferred
// from its tensors.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PatnetStatus patnet_model_load(const char *path, struct PatnetModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum PatnetStatus patnet_model_save(const struct PatnetModel *model, const char *path);

// Writes a new fused copy of `model` to `out`; `model` is left unchanged.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum PatnetStatus patnet_model_fuse(const struct PatnetModel *model, struct PatnetModel **out);

// Runs a forward pass on `batch` NCHW images of 3 x `height` x `width`
// floats and writes `batch * num_classes` logits.
//
// # Safety
// `input` must hold `batch * 3 * height * width` floats and `logits` must
// hold `logits_len` floats.
enum PatnetStatus patnet_model_forward(const struct PatnetModel *model,
                                       const float *input,
                                       uint32_t batch,
                                       uint32_t height,
                                       uint32_t width,
                                       float *logits,
                                       size_t logits_len);

// Number of classifier outputs per image, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t patnet_model_num_classes(const struct PatnetModel *model);

// Input side length the model was built for, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t patnet_model_input_size(const struct PatnetModel *model);

// 1 if the model has no batch-norm tensors, 0 otherwise or for null.
//
// # Safety
// `model` must be null or a live handle.
int32_t patnet_model_is_fused(const struct PatnetModel *model);

// Learnable parameter count of `variant`.
//
// # Safety
// `variant` must be a NUL-terminated string and `out` a valid pointer.
enum PatnetStatus patnet_count_params(const char *variant, uint64_t *out);

// Multiply-accumulate count of one unfused forward pass at `input_size`.
//
// # Safety
// `variant` must be a NUL-terminated string and `out` a valid pointer.
enum PatnetStatus patnet_count_flops(const char *variant, uint32_t input_size, uint64_t *out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void patnet_model_free(struct PatnetModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATNET_H */
