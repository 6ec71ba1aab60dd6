#ifndef DRRHO_H
#define DRRHO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum DrrhoStatus {
  DRRHO_STATUS_OK = 0,
  DRRHO_STATUS_NULL_POINTER = 1,
  DRRHO_STATUS_INVALID_ARGUMENT = 2,
  DRRHO_STATUS_CONFIG = 3,
  DRRHO_STATUS_IO = 4,
  DRRHO_STATUS_FORMAT = 5,
  DRRHO_STATUS_CHECKSUM = 6,
  DRRHO_STATUS_NUMERIC = 7,
  DRRHO_STATUS_STATE = 8,
  DRRHO_STATUS_PANIC = 9,
} DrrhoStatus;

/*
 Reference embedding cache handle.
 */
typedef struct DrrhoCache DrrhoCache;

/*
 Paired dataset handle.
 */
typedef struct DrrhoDataset DrrhoDataset;

/*
 Two-tower model handle.
 */
typedef struct DrrhoModel DrrhoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Description of the last failure on this thread, or an empty string.
 */
const char *drrho_last_error(void);

/*
 Free a string returned by this library.

 # Safety
 `s` must come from this library and not have been freed.
 */
void drrho_string_free(char *s);

/*
 Generate a synthetic dataset.

 # Safety
 `out` must be valid for writes.
 */
enum DrrhoStatus drrho_dataset_generate(size_t n,
                                        size_t d_x,
                                        size_t d_y,
                                        size_t d_latent,
                                        double noise_sigma,
                                        double test_fraction,
                                        uint64_t seed,
                                        struct DrrhoDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum DrrhoStatus drrho_dataset_load(const char *path, struct DrrhoDataset **out);

/*
 # Safety
 `dataset` must be a live handle and `path` a NUL-terminated string.
 */
enum DrrhoStatus drrho_dataset_save(const struct DrrhoDataset *dataset, const char *path);

/*
 Number of pairs, or 0 for a null handle.

 # Safety
 `dataset` must be null or a live handle.
 */
size_t drrho_dataset_len(const struct DrrhoDataset *dataset);

/*
 # Safety
 `dataset` must be null or a handle not yet freed.
 */
void drrho_dataset_free(struct DrrhoDataset *dataset);

/*
 Randomly initialized model with `d`-dimensional embeddings.

 # Safety
 `out` must be valid for writes.
 */
enum DrrhoStatus drrho_model_random(size_t d,
                                    size_t d_x,
                                    size_t d_y,
                                    double tau,
                                    uint64_t seed,
                                    struct DrrhoModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum DrrhoStatus drrho_model_load(const char *path, struct DrrhoModel **out);

/*
 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DrrhoStatus drrho_model_save(const struct DrrhoModel *model, const char *path);

/*
 Current temperature of the model, or NaN for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
double drrho_model_tau(const struct DrrhoModel *model);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void drrho_model_free(struct DrrhoModel *model);

/*
 Embed every pair of `dataset` with `model`.

 # Safety
 Handles must be live and `out` valid for writes.
 */
enum DrrhoStatus drrho_cache_build(const struct DrrhoDataset *dataset,
                                   const struct DrrhoModel *model,
                                   struct DrrhoCache **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum DrrhoStatus drrho_cache_load(const char *path, struct DrrhoCache **out);

/*
 # Safety
 `cache` must be a live handle and `path` a NUL-terminated string.
 */
enum DrrhoStatus drrho_cache_save(const struct DrrhoCache *cache, const char *path);

/*
 # Safety
 `cache` must be null or a handle not yet freed.
 */
void drrho_cache_free(struct DrrhoCache *cache);

/*
 Train with a JSON configuration (missing keys take their defaults).
 `cache` may be null for methods that need no reference. On success
 `out_model` receives the trained model and, when non-null, `out_report`
 receives the report JSON.

 # Safety
 Handles must be live or null as documented; `config_json` must be a
 NUL-terminated string; out-pointers must be valid for writes.
 */
enum DrrhoStatus drrho_train(const struct DrrhoDataset *dataset,
                             const struct DrrhoCache *cache,
                             const char *config_json,
                             struct DrrhoModel **out_model,
                             char **out_report);

/*
 Test-split recall@1 of `model` on `dataset`.

 # Safety
 Handles must be live and `out` valid for writes.
 */
enum DrrhoStatus drrho_evaluate(const struct DrrhoModel *model,
                                const struct DrrhoDataset *dataset,
                                double *out);

/*
 Mean of the `k` largest of `len` losses.

 # Safety
 `losses` must point to `len` doubles and `out` be valid for writes.
 */
enum DrrhoStatus drrho_cvar_topk(const double *losses, size_t len, size_t k, double *out);

/*
 # Safety
 `losses` must point to `len` doubles and `out` be valid for writes.
 */
enum DrrhoStatus drrho_kl_regularized_risk(const double *losses,
                                           size_t len,
                                           double tau,
                                           double *out);

/*
 Risk and optimal temperature of the KL-constrained problem with radius
 `rho / n`. `out_tau` may be null.

 # Safety
 `losses` must point to `len` doubles; `out_risk` must be valid for writes.
 */
enum DrrhoStatus drrho_kl_constrained_risk(const double *losses,
                                           size_t len,
                                           double rho,
                                           size_t n,
                                           double *out_risk,
                                           double *out_tau);

/*
 χ²-constrained risk of `len` losses. When `out_weights` is non-null it
 receives the `len` optimal weights.

 # Safety
 `losses` must point to `len` doubles; `out_risk` must be valid for
 writes; `out_weights` must be null or valid for `len` writes.
 */
enum DrrhoStatus drrho_chi2_dro_risk(const double *losses,
                                     size_t len,
                                     double rho,
                                     double *out_risk,
                                     double *out_weights);

/*
 Global contrastive objective of an `n × n` row-major similarity matrix.
 `reference` may be null for the reference-free objective. With
 `exclude_anchor` the positive pair is left out of each anchor's set.

 # Safety
 `target` (and `reference` when non-null) must point to `n * n` doubles.
 */
enum DrrhoStatus drrho_global_objective(const double *target,
                                        const double *reference_sim,
                                        size_t n,
                                        double tau,
                                        bool exclude_anchor,
                                        double *out);

/*
 Retrieval recall@1 of an `n × n` row-major similarity matrix.

 # Safety
 `sim` must point to `n * n` doubles and `out` be valid for writes.
 */
enum DrrhoStatus drrho_recall_at_1(const double *sim, size_t n, double *out);

/*
 Least-squares fit of `error = alpha * compute^beta` in log space.

 # Safety
 `compute` and `error` must point to `len` doubles; outputs must be valid
 for writes.
 */
enum DrrhoStatus drrho_fit_scaling_law(const double *compute,
                                       const double *error,
                                       size_t len,
                                       double *out_alpha,
                                       double *out_beta,
                                       double *out_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRRHO_H */
