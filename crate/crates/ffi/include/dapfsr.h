#ifndef DAPFSR_H
#define DAPFSR_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; the non-zero library codes equal the CLI exit codes.
typedef enum DapfsrStatus {
  DAPFSR_STATUS_OK = 0,
  DAPFSR_STATUS_CONFIG = 2,
  DAPFSR_STATUS_CONTRACT = 3,
  DAPFSR_STATUS_NUMERIC = 4,
  DAPFSR_STATUS_IO = 5,
  DAPFSR_STATUS_LOAD = 6,
  DAPFSR_STATUS_PAIRING = 7,
  DAPFSR_STATUS_NULL_ARGUMENT = 10,
  DAPFSR_STATUS_INVALID_UTF8 = 11,
  DAPFSR_STATUS_PANIC = 12,
} DapfsrStatus;

// Loaded encoder, decoder and latent statistics.
typedef struct DapfsrModel DapfsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread; empty after a successful call. The
// pointer stays valid until the next call on this thread.
const char *dapfsr_last_error(void);

// Loads a decoder checkpoint and the encoder trained against it.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum DapfsrStatus dapfsr_model_load(const char *decoder_path,
                                    const char *encoder_path,
                                    struct DapfsrModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from `dapfsr_model_load` and not be used afterwards.
void dapfsr_model_free(struct DapfsrModel *model);

// LR input side length and HR output side length.
//
// # Safety
// All pointers must be valid.
enum DapfsrStatus dapfsr_model_sizes(const struct DapfsrModel *model,
                                     uintptr_t *lr_size,
                                     uintptr_t *hr_size);

// Super-resolves one LR image into `hr_out`.
//
// # Safety
// `lr` must hold `lr_len` doubles and `hr_out` `hr_len` writable doubles.
enum DapfsrStatus dapfsr_super_resolve(const struct DapfsrModel *model,
                                       const double *lr,
                                       uintptr_t lr_len,
                                       double *hr_out,
                                       uintptr_t hr_len);

// One-shot adaptation of the model's decoder to the exemplar pair, in
// place. `config_toml` may be null for defaults; otherwise it is an
// experiment TOML whose `adapt` and `losses` sections are used.
//
// # Safety
// Image pointers must hold the stated number of doubles; `config_toml`
// must be null or NUL-terminated.
enum DapfsrStatus dapfsr_adapt(struct DapfsrModel *model,
                               const double *exemplar_lr,
                               uintptr_t lr_len,
                               const double *exemplar_hr,
                               uintptr_t hr_len,
                               const char *config_toml);

// Writes the model's current decoder (adapted or not) as a checkpoint.
//
// # Safety
// `path` must be NUL-terminated.
enum DapfsrStatus dapfsr_model_save_decoder(const struct DapfsrModel *model, const char *path);

// Peak-1 PSNR in dB; identical images give positive infinity.
//
// # Safety
// `a` and `b` must each hold `height * width * channels` doubles.
enum DapfsrStatus dapfsr_psnr(const double *a,
                              const double *b,
                              uintptr_t height,
                              uintptr_t width,
                              uintptr_t channels,
                              double *out);

// Mean windowed SSIM on channel-mean grayscale.
//
// # Safety
// `a` and `b` must each hold `height * width * channels` doubles.
enum DapfsrStatus dapfsr_ssim(const double *a,
                              const double *b,
                              uintptr_t height,
                              uintptr_t width,
                              uintptr_t channels,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAPFSR_H */
