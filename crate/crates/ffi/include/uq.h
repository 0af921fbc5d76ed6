#ifndef UQ_FFI_H
#define UQ_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UqAnswerLabel {
  UqAnswerLabel_Yes = 0,
  UqAnswerLabel_No = 1,
  UqAnswerLabel_Unknown = 2,
} UqAnswerLabel;

typedef enum UqEstimatorKind {
  UqEstimatorKind_Discrete = 0,
  UqEstimatorKind_RaoBlackwell = 1,
  UqEstimatorKind_WithinOnly = 2,
  UqEstimatorKind_Combined = 3,
} UqEstimatorKind;

typedef enum UqJudgeKind {
  UqJudgeKind_BinaryRule = 0,
  UqJudgeKind_NormalizedExact = 1,
} UqJudgeKind;

typedef enum UqReliability {
  UqReliability_High = 0,
  UqReliability_Medium = 1,
  UqReliability_Low = 2,
} UqReliability;

/**
 * Status code returned by every fallible function.
 */
typedef enum UqStatus {
  UqStatus_Ok = 0,
  UqStatus_InvalidArgument = 1,
  UqStatus_InvalidUtf8 = 2,
  UqStatus_MissingLikelihoods = 3,
  UqStatus_DegenerateLabels = 4,
  UqStatus_EmptyInput = 5,
  UqStatus_InternalError = 6,
} UqStatus;

/**
 * Clustering result handle.
 */
typedef struct UqClustering UqClustering;

/**
 * Sample accumulator; feed texts (plus optional token log-probs), then
 * cluster.
 */
typedef struct UqSampleSet UqSampleSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Allocate an empty sample set. Free with `uq_sample_set_free`.
 */
struct UqSampleSet *uq_sample_set_new(void);

/**
 * Append one sampled generation.
 *
 * `token_logprobs` may be NULL with `logprob_count` 0 for a sample
 * without likelihoods; otherwise every value must be finite and <= 0.
 *
 * # Safety
 * `set` must be a live pointer from `uq_sample_set_new`; `text` must be a
 * valid NUL-terminated string; `token_logprobs`, when non-NULL, must
 * point to `logprob_count` readable doubles.
 */
enum UqStatus uq_sample_set_push(struct UqSampleSet *set,
                                 const char *text,
                                 const double *token_logprobs,
                                 uintptr_t logprob_count);

/**
 * Number of samples pushed so far.
 *
 * # Safety
 * `set` must be a live pointer from `uq_sample_set_new` or NULL.
 */
uintptr_t uq_sample_set_len(const struct UqSampleSet *set);

/**
 * # Safety
 * `set` must come from `uq_sample_set_new` and not already be freed.
 */
void uq_sample_set_free(struct UqSampleSet *set);

/**
 * Cluster the samples with the selected judge. On success `*out` owns a
 * new clustering handle (free with `uq_clustering_free`).
 *
 * # Safety
 * `set` must be a live sample-set pointer; `out` must point to writable
 * pointer storage.
 */
enum UqStatus uq_cluster(const struct UqSampleSet *set,
                         enum UqJudgeKind judge,
                         struct UqClustering **out);

/**
 * Number of semantic clusters.
 *
 * # Safety
 * `clustering` must be a live pointer from `uq_cluster` or NULL.
 */
uintptr_t uq_clustering_cluster_count(const struct UqClustering *clustering);

/**
 * Entropy of the clustering under one estimator, in nats.
 *
 * # Safety
 * `clustering` must be a live pointer from `uq_cluster`; `out` must point
 * to writable double storage.
 */
enum UqStatus uq_clustering_entropy(const struct UqClustering *clustering,
                                    enum UqEstimatorKind estimator,
                                    double *out);

/**
 * # Safety
 * `clustering` must come from `uq_cluster` and not already be freed.
 */
void uq_clustering_free(struct UqClustering *clustering);

/**
 * DPO loss -ln(sigmoid(beta * ((wp - wr) - (lp - lr)))).
 *
 * # Safety
 * `out` must point to writable double storage.
 */
enum UqStatus uq_dpo_loss(double beta,
                          double winner_policy_logprob,
                          double winner_reference_logprob,
                          double loser_policy_logprob,
                          double loser_reference_logprob,
                          double *out);

/**
 * AUROC of uncertainty against errors; `correct[i]` nonzero means the
 * i-th output was correct. Needs at least one error and one correct.
 *
 * # Safety
 * `uncertainty` and `correct` must point to `len` readable elements;
 * `out` must point to writable double storage.
 */
enum UqStatus uq_auroc(const double *uncertainty,
                       const uint8_t *correct,
                       uintptr_t len,
                       double *out);

/**
 * Three-level reliability index of a sentence entropy (nats).
 *
 * # Safety
 * `out` must point to writable storage.
 */
enum UqStatus uq_reliability_index(double entropy_nats,
                                   double theta_high,
                                   double theta_low,
                                   enum UqReliability *out);

/**
 * Rule-based yes/no/unknown parse of an answer text.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must point to
 * writable storage.
 */
enum UqStatus uq_normalize_answer(const char *text, enum UqAnswerLabel *out);

/**
 * Static library version string; do not free.
 */
const char *uq_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UQ_FFI_H */
