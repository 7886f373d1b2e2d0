#ifndef EDD_H
#define EDD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EddStatus {
  EDD_STATUS_OK = 0,
  /**
   * Invalid argument or state.
   */
  EDD_STATUS_INVALID = 1,
  /**
   * A configured input file or directory does not exist.
   */
  EDD_STATUS_MISSING_INPUT = 2,
  /**
   * Distillation hit a NaN or infinite loss.
   */
  EDD_STATUS_NON_FINITE = 3,
  /**
   * A file is truncated or has the wrong layout.
   */
  EDD_STATUS_FORMAT = 4,
  EDD_STATUS_IO = 5,
  EDD_STATUS_NULL_ARGUMENT = 6,
  EDD_STATUS_CONFIG = 7,
  EDD_STATUS_PANIC = 8,
} EddStatus;

/**
 * Resolved run configuration.
 */
typedef struct EddConfig EddConfig;

/**
 * A loaded dataset split.
 */
typedef struct EddDataset EddDataset;

/**
 * A pool of pretrained checkpoints.
 */
typedef struct EddPool EddPool;

/**
 * A synthetic image set.
 */
typedef struct EddSynthetic EddSynthetic;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next failing call.
 */
const char *edd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *edd_version(void);

/**
 * A configuration holding every default.
 */
enum EddStatus edd_config_new(struct EddConfig **out);

/**
 * Reads a `key = value` file on top of the defaults.
 */
enum EddStatus edd_config_load(const char *path, struct EddConfig **out);

/**
 * Sets one key; unknown keys fail with `EDD_STATUS_CONFIG`.
 */
enum EddStatus edd_config_set(struct EddConfig *cfg, const char *key, const char *value);

void edd_config_free(struct EddConfig *cfg);

/**
 * Loads the training and test splits named by the configuration.
 */
enum EddStatus edd_dataset_load(const struct EddConfig *cfg,
                                struct EddDataset **train,
                                struct EddDataset **test);

/**
 * Number of images, or 0 for NULL.
 */
size_t edd_dataset_len(const struct EddDataset *ds);

void edd_dataset_free(struct EddDataset *ds);

/**
 * Pretrains `pool.n` models for `pool.epochs` epochs and writes them to `pool.dir`.
 */
enum EddStatus edd_pretrain(const struct EddConfig *cfg,
                            const struct EddDataset *train,
                            struct EddPool **out);

/**
 * Loads every `.ddck` checkpoint in a directory.
 */
enum EddStatus edd_pool_load(const char *dir, struct EddPool **out);

size_t edd_pool_len(const struct EddPool *pool);

void edd_pool_free(struct EddPool *pool);

/**
 * Initializes from real images and distills. The update counts may be NULL.
 */
enum EddStatus edd_distill(const struct EddConfig *cfg,
                           const struct EddDataset *train,
                           const struct EddPool *pool,
                           struct EddSynthetic **out,
                           size_t *synthetic_updates,
                           size_t *network_updates);

enum EddStatus edd_synthetic_import(const char *path, struct EddSynthetic **out);

enum EddStatus edd_synthetic_export(const struct EddSynthetic *s, const char *path);

/**
 * Stored image dimensions `[n, c, h, w]`.
 */
enum EddStatus edd_synthetic_dims(const struct EddSynthetic *s, size_t *dims);

/**
 * Copies the stored images as 8-bit pixels (NCHW). `len` must equal n*c*h*w.
 */
enum EddStatus edd_synthetic_pixels(const struct EddSynthetic *s, uint8_t *buf, size_t len);

void edd_synthetic_free(struct EddSynthetic *s);

/**
 * Trains `eval.reps` networks on the set and reports mean and std of test accuracy.
 */
enum EddStatus edd_eval(const struct EddConfig *cfg,
                        const struct EddSynthetic *s,
                        const struct EddDataset *test,
                        double *mean,
                        double *std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDD_H */
