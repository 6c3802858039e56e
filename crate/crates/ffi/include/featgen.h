#ifndef FEATGEN_H
#define FEATGEN_H

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every call.
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_ARGUMENT = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_IO = 3,
  FG_STATUS_FORMAT = 4,
  FG_STATUS_TRAIN = 5,
  FG_STATUS_CLASSIFY = 6,
  FG_STATUS_EVAL = 7,
  FG_STATUS_PANIC = 8,
} FgStatus;

typedef enum FgVariant {
  FG_VARIANT_GAN = 0,
  FG_VARIANT_WGAN = 1,
  FG_VARIANT_CLS_WGAN = 2,
  FG_VARIANT_GMMN = 3,
} FgVariant;

// Opaque dataset handle.
typedef struct FgDataset FgDataset;

// Opaque generator handle.
typedef struct FgGenerator FgGenerator;

// Generator training settings. Zero `hidden_d` or `noise_dim` selects the
// defaults (variant-dependent width, embedding width).
typedef struct FgTrainConfig {
  enum FgVariant variant;
  uint32_t epochs;
  uint32_t batch_size;
  uint32_t critic_steps;
  uint32_t critic_warmup;
  uint32_t hidden_g;
  uint32_t hidden_d;
  uint32_t noise_dim;
  double learn_rate;
  double adam_beta1;
  double adam_beta2;
  double lambda_gp;
  double beta_cls;
  double leaky_slope;
  uint64_t seed;
  uint32_t cls_epochs;
  uint32_t cls_batch_size;
  double cls_learn_rate;
} FgTrainConfig;

// Scores of one synthetic feature set, in percent.
typedef struct FgScores {
  double zsl_t1;
  double gzsl_u;
  double gzsl_s;
  double gzsl_h;
} FgScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next `fg_*` call on the same thread.
const char *fg_last_error(void);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FgStatus fg_dataset_load(const char *path, struct FgDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum FgStatus fg_dataset_save(const struct FgDataset *ds, const char *path);

// Synthetic attribute-conditioned dataset (see the `synth-data` command).
//
// # Safety
// `out` must be writable.
enum FgStatus fg_dataset_synthetic(uint32_t n_seen,
                                   uint32_t n_unseen,
                                   uint32_t d_x,
                                   uint32_t d_c,
                                   uint32_t samples_per_class,
                                   double noise_sigma,
                                   uint64_t seed,
                                   struct FgDataset **out);

// Writes feature width, embedding width, class count and seen/unseen class
// counts. Any output pointer may be null.
//
// # Safety
// `ds` must be a live handle; non-null outputs must be writable.
enum FgStatus fg_dataset_dims(const struct FgDataset *ds,
                              uint32_t *d_x,
                              uint32_t *d_c,
                              uint32_t *n_seen,
                              uint32_t *n_unseen);

// # Safety
// `ds` must come from this library and not be used afterwards; null is ignored.
void fg_dataset_free(struct FgDataset *ds);

// Defaults for `variant`.
//
// # Safety
// `out` must be writable.
enum FgStatus fg_train_config_default(enum FgVariant variant, struct FgTrainConfig *out);

// Trains a generator on the dataset's seen-class training rows.
//
// # Safety
// `ds` and `config` must be valid pointers; `out` must be writable.
enum FgStatus fg_train(const struct FgDataset *ds,
                       const struct FgTrainConfig *config,
                       struct FgGenerator **out);

// Loads a generator checkpoint (`FGNW`).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FgStatus fg_generator_load(const char *path, double leaky_slope, struct FgGenerator **out);

// # Safety
// `gen` must be a live handle and `path` a NUL-terminated string.
enum FgStatus fg_generator_save(const struct FgGenerator *gen, const char *path);

// # Safety
// `gen` must come from this library and not be used afterwards; null is ignored.
void fg_generator_free(struct FgGenerator *gen);

// Generates `n_syn` features for every unseen class, in ascending class
// order. `features` must hold `n_syn · n_unseen · d_x` floats and `labels`
// `n_syn · n_unseen` ids; the lengths are checked.
//
// # Safety
// Handles must be live; `features` and `labels` must point to buffers of
// the stated lengths.
enum FgStatus fg_synthesize_unseen(const struct FgGenerator *gen,
                                   const struct FgDataset *ds,
                                   uint32_t n_syn,
                                   uint64_t seed,
                                   float *features,
                                   uintptr_t features_len,
                                   uint32_t *labels,
                                   uintptr_t labels_len);

// Synthesises `n_syn` unseen-class features, trains softmax classifiers
// (ZSL on synthetic rows, GZSL on real seen plus synthetic rows) and scores
// them on the dataset's test partitions.
//
// # Safety
// Handles must be live; `config` may be null for classifier defaults;
// `out` must be writable.
enum FgStatus fg_evaluate_synthesis(const struct FgGenerator *gen,
                                    const struct FgDataset *ds,
                                    uint32_t n_syn,
                                    uint64_t seed,
                                    const struct FgTrainConfig *config,
                                    struct FgScores *out);

// `2us/(u+s)`, 0 when both are 0.
double fg_harmonic_mean(double u, double s);

// Per-class averaged top-1 accuracy (percent) over the classes present in
// `truths`.
//
// # Safety
// `predictions` and `truths` must each point to `n` ids; `out` must be writable.
enum FgStatus fg_per_class_top1(const uint32_t *predictions,
                                const uint32_t *truths,
                                uintptr_t n,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATGEN_H */
