#ifndef PCRL_H
#define PCRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Denominator of the contrastive loss.
 */
typedef enum PcrlDenominator {
  /**
   * Log-sum-exp over all columns, positive included.
   */
  PCRL_DENOMINATOR_STANDARD = 0,
  /**
   * Log-sum-exp over the off-diagonal columns only.
   */
  PCRL_DENOMINATOR_PAPER = 1,
} PcrlDenominator;

/**
 * Result of every call.
 */
typedef enum PcrlStatus {
  PCRL_STATUS_OK = 0,
  PCRL_STATUS_NULL_ARGUMENT = 1,
  PCRL_STATUS_INVALID_ARGUMENT = 2,
  PCRL_STATUS_DATA = 3,
  PCRL_STATUS_NUMERIC = 4,
  PCRL_STATUS_PANIC = 5,
} PcrlStatus;

/**
 * Opened synthetic corpus.
 */
typedef struct PcrlDataset PcrlDataset;

/**
 * Trained model held in 32-bit precision.
 */
typedef struct PcrlModel PcrlModel;

/**
 * Corpus-level report metrics, all in [0, 1] except `cider_d` in [0, 10].
 */
typedef struct PcrlMetrics {
  double b1;
  double b2;
  double b3;
  double b4;
  double meteor_exact;
  double rouge_l;
  double cider_d;
  double clinical_precision;
  double clinical_recall;
  double clinical_f1;
} PcrlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *pcrl_last_error(void);

/**
 * Library version as a static string.
 */
const char *pcrl_version(void);

void pcrl_string_free(char *s);

/**
 * Writes a corpus of `n` samples (split 7:1:2) under `out_dir`.
 */
enum PcrlStatus pcrl_dataset_generate(size_t n, uint64_t seed, const char *out_dir);

enum PcrlStatus pcrl_dataset_open(const char *root, struct PcrlDataset **out);

void pcrl_dataset_free(struct PcrlDataset *ds);

/**
 * Number of samples in a split (0 train, 1 val, 2 test).
 */
enum PcrlStatus pcrl_dataset_split_len(const struct PcrlDataset *ds, uint32_t split, size_t *out);

/**
 * Builds and writes `<sample_id>.pcgl` galleries for every sample with the
 * default proposal and filter settings; stores the candidate total.
 */
enum PcrlStatus pcrl_gallery_build(const struct PcrlDataset *ds,
                                   const char *out_dir,
                                   size_t *candidates);

/**
 * Trains per a `key = value` config file.
 */
enum PcrlStatus pcrl_train(const char *config_path);

enum PcrlStatus pcrl_model_load(const char *path, struct PcrlModel **out);

void pcrl_model_free(struct PcrlModel *model);

enum PcrlStatus pcrl_model_parameter_count(const struct PcrlModel *model, size_t *out);

/**
 * Generates a report for one sample of `ds` by nucleus sampling; `greedy`
 * nonzero selects argmax decoding. The string is released with
 * [`pcrl_string_free`].
 */
enum PcrlStatus pcrl_model_generate(const struct PcrlModel *model,
                                    const struct PcrlDataset *ds,
                                    const char *sample_id,
                                    double temperature,
                                    double top_p,
                                    size_t max_len,
                                    int32_t greedy,
                                    uint64_t seed,
                                    char **out);

/**
 * Scores `n` candidate reports against `n` references with word tokens and
 * the 24 entity keywords.
 */
enum PcrlStatus pcrl_metrics_score(const char *const *candidates,
                                   const char *const *references,
                                   size_t n,
                                   struct PcrlMetrics *out);

/**
 * Symmetric contrastive loss between paired row-major `[k, d]` matrices.
 */
enum PcrlStatus pcrl_info_nce(const double *a,
                              const double *b,
                              size_t k,
                              size_t d,
                              double tau,
                              double alpha_v,
                              double alpha_w,
                              enum PcrlDenominator mode,
                              double *out);

/**
 * Dice loss of `[k, h, w]` probabilities against `[k, h, w]` binary targets
 * (nonzero bytes are foreground).
 */
enum PcrlStatus pcrl_dice_loss(const double *predicted,
                               const uint8_t *targets,
                               size_t k,
                               size_t h,
                               size_t w,
                               double eps,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCRL_H */
