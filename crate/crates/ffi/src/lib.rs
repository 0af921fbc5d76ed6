//! C ABI for the semantic-uncertainty engine.
//!
//! Opaque handles + status codes; every function is safe to call from any
//! thread as long as a handle is not used concurrently with its free. The
//! header is generated into `include/uq.h` by the build script.

use std::ffi::{c_char, CStr};

use uq_core::clustering::{
    cluster, BinaryRuleJudge, ClusterOptions, Clustering, EquivalenceJudge, NormalizedExactJudge,
};
use uq_core::dpo::{dpo_loss, DpoConfig, PreferencePair, ScoredGeneration};
use uq_core::entropy::{discrete_entropy, entropy_report, EstimatorKind};
use uq_core::eval::{auroc, EvalRecord};
use uq_core::gateway::{FinishReason, GenerationSample, ProbeContext, SampleSet, SamplingConfig};
use uq_core::report::{reliability_index, Reliability, ReliabilityThresholds};
use uq_core::text::{normalize_answer, AnswerLabel};
use uq_core::UqError;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidUtf8 = 2,
    MissingLikelihoods = 3,
    DegenerateLabels = 4,
    EmptyInput = 5,
    InternalError = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqJudgeKind {
    BinaryRule = 0,
    NormalizedExact = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqEstimatorKind {
    Discrete = 0,
    RaoBlackwell = 1,
    WithinOnly = 2,
    Combined = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqReliability {
    High = 0,
    Medium = 1,
    Low = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqAnswerLabel {
    Yes = 0,
    No = 1,
    Unknown = 2,
}

fn status_of(err: &UqError) -> UqStatus {
    match err {
        UqError::MissingLikelihoods => UqStatus::MissingLikelihoods,
        UqError::DegenerateLabels => UqStatus::DegenerateLabels,
        UqError::EmptySampleSet | UqError::EmptyReport | UqError::EmptySentence
        | UqError::EmptyBatch => UqStatus::EmptyInput,
        UqError::InvalidInput(_) | UqError::InvalidConfig(_) | UqError::InvalidThresholds(_) => {
            UqStatus::InvalidArgument
        }
        _ => UqStatus::InternalError,
    }
}

/// Sample accumulator; feed texts (plus optional token log-probs), then
/// cluster.
pub struct UqSampleSet {
    samples: Vec<GenerationSample>,
}

/// Clustering result handle.
pub struct UqClustering {
    inner: Clustering,
}

/// Allocate an empty sample set. Free with `uq_sample_set_free`.
#[no_mangle]
pub extern "C" fn uq_sample_set_new() -> *mut UqSampleSet {
    Box::into_raw(Box::new(UqSampleSet { samples: Vec::new() }))
}

/// Append one sampled generation.
///
/// `token_logprobs` may be NULL with `logprob_count` 0 for a sample
/// without likelihoods; otherwise every value must be finite and <= 0.
///
/// # Safety
/// `set` must be a live pointer from `uq_sample_set_new`; `text` must be a
/// valid NUL-terminated string; `token_logprobs`, when non-NULL, must
/// point to `logprob_count` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn uq_sample_set_push(
    set: *mut UqSampleSet,
    text: *const c_char,
    token_logprobs: *const f64,
    logprob_count: usize,
) -> UqStatus {
    let Some(set) = set.as_mut() else {
        return UqStatus::InvalidArgument;
    };
    if text.is_null() {
        return UqStatus::InvalidArgument;
    }
    let Ok(text) = CStr::from_ptr(text).to_str() else {
        return UqStatus::InvalidUtf8;
    };
    let logprobs = if token_logprobs.is_null() || logprob_count == 0 {
        Vec::new()
    } else {
        let slice = std::slice::from_raw_parts(token_logprobs, logprob_count);
        if slice.iter().any(|lp| !lp.is_finite() || *lp > 0.0) {
            return UqStatus::InvalidArgument;
        }
        slice.to_vec()
    };
    set.samples.push(GenerationSample {
        text: text.to_string(),
        token_logprobs: logprobs,
        finish_reason: FinishReason::Stop,
    });
    UqStatus::Ok
}

/// Number of samples pushed so far.
///
/// # Safety
/// `set` must be a live pointer from `uq_sample_set_new` or NULL.
#[no_mangle]
pub unsafe extern "C" fn uq_sample_set_len(set: *const UqSampleSet) -> usize {
    set.as_ref().map_or(0, |s| s.samples.len())
}

/// # Safety
/// `set` must come from `uq_sample_set_new` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn uq_sample_set_free(set: *mut UqSampleSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

fn build_sample_set(samples: &[GenerationSample]) -> SampleSet {
    SampleSet {
        context: ProbeContext::new("ffi", "ffi"),
        samples: samples.to_vec(),
        sampling_config: SamplingConfig {
            m: samples.len().max(1) as u32,
            ..Default::default()
        },
    }
}

/// Cluster the samples with the selected judge. On success `*out` owns a
/// new clustering handle (free with `uq_clustering_free`).
///
/// # Safety
/// `set` must be a live sample-set pointer; `out` must point to writable
/// pointer storage.
#[no_mangle]
pub unsafe extern "C" fn uq_cluster(
    set: *const UqSampleSet,
    judge: UqJudgeKind,
    out: *mut *mut UqClustering,
) -> UqStatus {
    let Some(set) = set.as_ref() else {
        return UqStatus::InvalidArgument;
    };
    if out.is_null() {
        return UqStatus::InvalidArgument;
    }
    if set.samples.is_empty() {
        return UqStatus::EmptyInput;
    }
    let judge: &dyn EquivalenceJudge = match judge {
        UqJudgeKind::BinaryRule => &BinaryRuleJudge,
        UqJudgeKind::NormalizedExact => &NormalizedExactJudge,
    };
    let sample_set = build_sample_set(&set.samples);
    match cluster(&sample_set, judge, &ClusterOptions::default()) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(UqClustering { inner }));
            UqStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Number of semantic clusters.
///
/// # Safety
/// `clustering` must be a live pointer from `uq_cluster` or NULL.
#[no_mangle]
pub unsafe extern "C" fn uq_clustering_cluster_count(clustering: *const UqClustering) -> usize {
    clustering.as_ref().map_or(0, |c| c.inner.clusters.len())
}

/// Entropy of the clustering under one estimator, in nats.
///
/// # Safety
/// `clustering` must be a live pointer from `uq_cluster`; `out` must point
/// to writable double storage.
#[no_mangle]
pub unsafe extern "C" fn uq_clustering_entropy(
    clustering: *const UqClustering,
    estimator: UqEstimatorKind,
    out: *mut f64,
) -> UqStatus {
    let Some(clustering) = clustering.as_ref() else {
        return UqStatus::InvalidArgument;
    };
    if out.is_null() {
        return UqStatus::InvalidArgument;
    }
    let kind = match estimator {
        UqEstimatorKind::Discrete => EstimatorKind::Discrete,
        UqEstimatorKind::RaoBlackwell => EstimatorKind::RaoBlackwell,
        UqEstimatorKind::WithinOnly => EstimatorKind::WithinOnly,
        UqEstimatorKind::Combined => EstimatorKind::Combined,
    };
    if kind == EstimatorKind::Discrete {
        return match discrete_entropy(&clustering.inner) {
            Ok(v) => {
                *out = v;
                UqStatus::Ok
            }
            Err(e) => status_of(&e),
        };
    }
    match entropy_report(&clustering.inner, "ffi") {
        Ok(report) => match report.values.get(kind) {
            Some(v) => {
                *out = v;
                UqStatus::Ok
            }
            None => UqStatus::MissingLikelihoods,
        },
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `clustering` must come from `uq_cluster` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn uq_clustering_free(clustering: *mut UqClustering) {
    if !clustering.is_null() {
        drop(Box::from_raw(clustering));
    }
}

/// DPO loss -ln(sigmoid(beta * ((wp - wr) - (lp - lr)))).
///
/// # Safety
/// `out` must point to writable double storage.
#[no_mangle]
pub unsafe extern "C" fn uq_dpo_loss(
    beta: f64,
    winner_policy_logprob: f64,
    winner_reference_logprob: f64,
    loser_policy_logprob: f64,
    loser_reference_logprob: f64,
    out: *mut f64,
) -> UqStatus {
    if out.is_null() {
        return UqStatus::InvalidArgument;
    }
    let config = DpoConfig { beta };
    if config.validate().is_err() {
        return UqStatus::InvalidArgument;
    }
    let inputs = [
        winner_policy_logprob,
        winner_reference_logprob,
        loser_policy_logprob,
        loser_reference_logprob,
    ];
    if inputs.iter().any(|v| !v.is_finite()) {
        return UqStatus::InvalidArgument;
    }
    let pair = PreferencePair::new(
        "ffi",
        ScoredGeneration {
            text: String::new(),
            policy_logprob: winner_policy_logprob,
            reference_logprob: winner_reference_logprob,
            score: 1.0,
        },
        ScoredGeneration {
            text: String::new(),
            policy_logprob: loser_policy_logprob,
            reference_logprob: loser_reference_logprob,
            score: 0.0,
        },
    );
    match pair {
        Ok(pair) => {
            *out = dpo_loss(&pair, &config);
            UqStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// AUROC of uncertainty against errors; `correct[i]` nonzero means the
/// i-th output was correct. Needs at least one error and one correct.
///
/// # Safety
/// `uncertainty` and `correct` must point to `len` readable elements;
/// `out` must point to writable double storage.
#[no_mangle]
pub unsafe extern "C" fn uq_auroc(
    uncertainty: *const f64,
    correct: *const u8,
    len: usize,
    out: *mut f64,
) -> UqStatus {
    if uncertainty.is_null() || correct.is_null() || out.is_null() || len == 0 {
        return UqStatus::InvalidArgument;
    }
    let scores = std::slice::from_raw_parts(uncertainty, len);
    let labels = std::slice::from_raw_parts(correct, len);
    let records: Vec<EvalRecord> = scores
        .iter()
        .zip(labels.iter())
        .enumerate()
        .map(|(i, (&u, &c))| EvalRecord {
            id: i.to_string(),
            uncertainty: u,
            correct: c != 0,
            estimator: EstimatorKind::Combined,
        })
        .collect();
    match auroc(&records) {
        Ok(v) => {
            *out = v;
            UqStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Three-level reliability index of a sentence entropy (nats).
///
/// # Safety
/// `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn uq_reliability_index(
    entropy_nats: f64,
    theta_high: f64,
    theta_low: f64,
    out: *mut UqReliability,
) -> UqStatus {
    if out.is_null() {
        return UqStatus::InvalidArgument;
    }
    let thresholds = ReliabilityThresholds {
        theta_high,
        theta_low,
    };
    match reliability_index(entropy_nats, &thresholds) {
        Ok(level) => {
            *out = match level {
                Reliability::High => UqReliability::High,
                Reliability::Medium => UqReliability::Medium,
                Reliability::Low => UqReliability::Low,
            };
            UqStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Rule-based yes/no/unknown parse of an answer text.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must point to
/// writable storage.
#[no_mangle]
pub unsafe extern "C" fn uq_normalize_answer(
    text: *const c_char,
    out: *mut UqAnswerLabel,
) -> UqStatus {
    if text.is_null() || out.is_null() {
        return UqStatus::InvalidArgument;
    }
    let Ok(text) = CStr::from_ptr(text).to_str() else {
        return UqStatus::InvalidUtf8;
    };
    *out = match normalize_answer(text) {
        AnswerLabel::Yes => UqAnswerLabel::Yes,
        AnswerLabel::No => UqAnswerLabel::No,
        AnswerLabel::Unknown => UqAnswerLabel::Unknown,
    };
    UqStatus::Ok
}

/// Static library version string; do not free.
#[no_mangle]
pub extern "C" fn uq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
