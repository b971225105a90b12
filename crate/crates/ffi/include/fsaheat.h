#ifndef FSAHEAT_H
#define FSAHEAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  FSA_STATUS_OK = 0,
  FSA_STATUS_NULL_ARGUMENT = 1,
  FSA_STATUS_INVALID_ARGUMENT = 2,
  FSA_STATUS_IO = 3,
  FSA_STATUS_CHECKPOINT = 4,
  FSA_STATUS_CONFIG = 5,
  FSA_STATUS_NUMERICAL = 6,
  FSA_STATUS_BUFFER_SIZE = 7,
  FSA_STATUS_PANIC = 8,
} FsaStatus;

/**
 * Sample generator: layouts, input channels and solver ground truth.
 */
typedef struct FsaOracle FsaOracle;

/**
 * A trained network with its input normalization.
 */
typedef struct FsaPredictor FsaPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length without the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fsa_last_error(char *buf, size_t len);

/**
 * Creates a generator from run-configuration TOML text (its `[dataset]`
 * section is used; the empty string selects defaults).
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
FsaStatus fsa_oracle_new(const char *config_toml, FsaOracle **out);

/**
 * # Safety
 * `oracle` must be null or a handle from [`fsa_oracle_new`] not yet freed.
 */
void fsa_oracle_free(FsaOracle *oracle);

/**
 * Grid size of generated samples.
 *
 * # Safety
 * All pointers must be valid.
 */
FsaStatus fsa_oracle_grid(const FsaOracle *oracle, size_t *rows, size_t *cols);

/**
 * Generates and solves the sample for `seed`. `inputs` receives the raw
 * channels (`4·R·C·8` values), `theta` the temperature rise (`4·R·C`).
 *
 * # Safety
 * `oracle` must be a live handle; the buffers must hold the stated lengths.
 */
FsaStatus fsa_oracle_sample(const FsaOracle *oracle,
                            uint64_t seed,
                            double *inputs,
                            size_t inputs_len,
                            double *theta,
                            size_t theta_len);

/**
 * Loads and verifies a checkpoint archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
FsaStatus fsa_predictor_open(const char *path, FsaPredictor **out);

/**
 * # Safety
 * `predictor` must be null or a handle from [`fsa_predictor_open`] not yet
 * freed.
 */
void fsa_predictor_free(FsaPredictor *predictor);

/**
 * Grid size the predictor was trained on.
 *
 * # Safety
 * All pointers must be valid.
 */
FsaStatus fsa_predictor_grid(const FsaPredictor *predictor, size_t *rows, size_t *cols);

/**
 * Predicts the temperature rise for raw inputs.
 *
 * # Safety
 * `predictor` must be a live handle; `inputs` must hold `inputs_len`
 * values and `theta` `theta_len` values.
 */
FsaStatus fsa_predictor_predict(const FsaPredictor *predictor,
                                const double *inputs,
                                size_t inputs_len,
                                double *theta,
                                size_t theta_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSAHEAT_H */
