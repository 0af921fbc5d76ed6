//! Error-prediction evaluation: AUROC of uncertainty scores against
//! correctness labels, percentile-bootstrap confidence intervals, and the
//! sampling-count / probes-per-sentence ablations.
//!
//! Polarity: "error" is the positive class and higher uncertainty is the
//! positive score, so AUROC is the probability that a random erroneous
//! output carries strictly higher uncertainty than a random correct one,
//! ties counting one half (Mann-Whitney).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, ClusterOptions, EquivalenceJudge};
use crate::entropy::{entropy_report, EstimatorKind};
use crate::error::{Result, UqError};
use crate::gateway::{
    sample_generations, CompletionBackend, GatewayOptions, ProbeContext, SamplingConfig,
};
use crate::report::{assess_report, AssessOptions, ReliabilityThresholds};

/// One (uncertainty, correctness) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub uncertainty: f64,
    pub correct: bool,
    pub estimator: EstimatorKind,
}

/// Correctness label for AUROC: the generation is correct iff the judge
/// finds it equivalent to the reference.
pub fn judge_correct(
    generated: &str,
    reference: &str,
    judge: &dyn EquivalenceJudge,
) -> Result<bool> {
    if reference.is_empty() {
        return Err(UqError::InvalidInput("reference is empty".into()));
    }
    crate::clustering::judge_equivalent(generated, reference, judge)
}

fn auroc_pairs(pairs: &[(f64, bool)]) -> Result<f64> {
    for (u, _) in pairs {
        if !u.is_finite() || *u < 0.0 {
            return Err(UqError::InvalidInput(format!(
                "uncertainty must be finite and >= 0, got {u}"
            )));
        }
    }
    let n_err = pairs.iter().filter(|(_, correct)| !correct).count();
    let n_corr = pairs.len() - n_err;
    if n_err == 0 || n_corr == 0 {
        return Err(UqError::DegenerateLabels);
    }

    // Midrank Mann-Whitney U, O(n log n).
    let mut indexed: Vec<(f64, bool)> = pairs.to_vec();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_err = 0.0;
    let mut i = 0;
    while i < indexed.len() {
        let mut j = i;
        while j < indexed.len() && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for rec in &indexed[i..j] {
            if !rec.1 {
                rank_sum_err += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_err - (n_err * (n_err + 1)) as f64 / 2.0;
    Ok(u / (n_err as f64 * n_corr as f64))
}

/// AUROC over records; errors must score higher for values above 0.5.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.uncertainty, r.correct)).collect();
    auroc_pairs(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap (2.5/97.5) of the AUROC with a seeded generator.
/// Resamples containing a single class are redrawn.
pub fn bootstrap_ci(records: &[EvalRecord], n_boot: usize, seed: u64) -> Result<BootstrapCi> {
    if n_boot < 100 {
        return Err(UqError::InvalidConfig(format!(
            "n_boot must be >= 100, got {n_boot}"
        )));
    }
    let point = auroc(records)?;
    let pairs: Vec<(f64, bool)> = records.iter().map(|r| (r.uncertainty, r.correct)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut consecutive_failures = 0usize;
    while stats.len() < n_boot {
        let resample: Vec<(f64, bool)> = (0..pairs.len())
            .map(|_| pairs[rng.gen_range(0..pairs.len())])
            .collect();
        match auroc_pairs(&resample) {
            Ok(value) => {
                stats.push(value);
                consecutive_failures = 0;
            }
            Err(UqError::DegenerateLabels) => {
                consecutive_failures += 1;
                if consecutive_failures > 10_000 {
                    return Err(UqError::DegenerateLabels);
                }
            }
            Err(e) => return Err(e),
        }
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite auroc"));
    Ok(BootstrapCi {
        point,
        lo: percentile(&stats, 0.025),
        hi: percentile(&stats, 0.975),
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// VQA-style case for the sampling-count ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaCase {
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub reference: String,
}

impl VqaCase {
    pub fn context(&self) -> ProbeContext {
        let mut ctx = ProbeContext::new(self.id.clone(), self.query.clone());
        ctx.image_ref = self.image_ref.clone();
        ctx
    }
}

/// Labeled report case for the probes-per-sentence ablation; `true` marks
/// a sentence planted as inconsistent (an error the uncertainty should
/// flag).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCase {
    pub id: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub sentence_labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKnob {
    M,
    Probes,
}

impl AblationKnob {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationKnob::M => "m",
            AblationKnob::Probes => "probes",
        }
    }
}

/// One grid point x estimator result. `failure` carries an explicit
/// marker instead of a silently missing row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub knob: AblationKnob,
    pub value: u32,
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_hi: Option<f64>,
    pub n_records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn validate_grid(values: &[u32]) -> Result<()> {
    if values.is_empty() {
        return Err(UqError::InvalidConfig("ablation grid is empty".into()));
    }
    if values[0] == 0 || values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(UqError::InvalidConfig(
            "grid values must be >= 1 and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn row_from_records(
    knob: AblationKnob,
    value: u32,
    estimator: EstimatorKind,
    records: &[EvalRecord],
    failures: &[String],
    n_boot: usize,
    seed: u64,
) -> AblationRow {
    let failure_note = if failures.is_empty() {
        None
    } else {
        Some(format!("{} case(s) failed: {}", failures.len(), failures[0]))
    };
    match bootstrap_ci(records, n_boot, seed) {
        Ok(ci) => AblationRow {
            knob,
            value,
            estimator,
            auroc: Some(ci.point),
            ci_lo: Some(ci.lo),
            ci_hi: Some(ci.hi),
            n_records: records.len(),
            failure: failure_note,
        },
        Err(e) => AblationRow {
            knob,
            value,
            estimator,
            auroc: None,
            ci_lo: None,
            ci_hi: None,
            n_records: records.len(),
            failure: Some(match failure_note {
                Some(note) => format!("{note}; {e}"),
                None => e.to_string(),
            }),
        },
    }
}

/// Sampling-count ablation: rerun sample-cluster-score at each `m`,
/// label correctness by judging the dominant cluster's representative
/// against the reference, and report AUROC per estimator.
#[allow(clippy::too_many_arguments)]
pub fn run_m_ablation(
    cases: &[VqaCase],
    m_values: &[u32],
    estimators: &[EstimatorKind],
    judge: &dyn EquivalenceJudge,
    backend: &dyn CompletionBackend,
    base_config: &SamplingConfig,
    gateway: &GatewayOptions,
    n_boot: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    validate_grid(m_values)?;
    if cases.is_empty() {
        return Err(UqError::InvalidInput("dataset is empty".into()));
    }
    if estimators.is_empty() {
        return Err(UqError::InvalidConfig("no estimators requested".into()));
    }
    let cluster_options = ClusterOptions::default();
    let mut rows = Vec::new();
    for &m in m_values {
        let config = SamplingConfig { m, ..*base_config };
        let mut records: Vec<EvalRecord> = Vec::new();
        let mut failures: Vec<String> = Vec::new();
        for case in cases {
            let outcome = (|| -> Result<Vec<EvalRecord>> {
                let context = case.context();
                let set = sample_generations(&context, &config, backend, gateway)?;
                let clustering = cluster(&set, judge, &cluster_options)?;
                let report = entropy_report(&clustering, &case.id)?;
                let dominant = clustering.dominant_cluster_index();
                let prediction =
                    &set.samples[clustering.clusters[dominant].representative_index].text;
                let correct = judge_correct(prediction, &case.reference, judge)?;
                Ok(estimators
                    .iter()
                    .filter_map(|&kind| {
                        report.values.get(kind).map(|value| EvalRecord {
                            id: case.id.clone(),
                            uncertainty: value,
                            correct,
                            estimator: kind,
                        })
                    })
                    .collect())
            })();
            match outcome {
                Ok(mut recs) => records.append(&mut recs),
                Err(e) => failures.push(format!("{}: {e}", case.id)),
            }
        }
        if records.is_empty() {
            return Err(UqError::BackendUnavailable(format!(
                "every case failed at m={m}: {}",
                failures.first().cloned().unwrap_or_default()
            )));
        }
        for &estimator in estimators {
            let subset: Vec<EvalRecord> = records
                .iter()
                .filter(|r| r.estimator == estimator)
                .cloned()
                .collect();
            rows.push(row_from_records(
                AblationKnob::M,
                m,
                estimator,
                &subset,
                &failures,
                n_boot,
                seed,
            ));
        }
    }
    Ok(rows)
}

/// Probes-per-sentence ablation over labeled reports: rerun the sentence
/// assessment at each probe count and score sentence entropy against the
/// planted labels.
#[allow(clippy::too_many_arguments)]
pub fn run_probes_ablation(
    cases: &[ReportCase],
    probes_values: &[u32],
    estimators: &[EstimatorKind],
    thresholds: &ReliabilityThresholds,
    backend: &dyn CompletionBackend,
    answers_config: &SamplingConfig,
    gateway: &GatewayOptions,
    n_boot: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    validate_grid(probes_values)?;
    if cases.is_empty() {
        return Err(UqError::InvalidInput("dataset is empty".into()));
    }
    for kind in estimators {
        if !matches!(kind, EstimatorKind::WithinOnly | EstimatorKind::Combined) {
            return Err(UqError::InvalidConfig(format!(
                "sentence-level ablation supports within_only|combined, got {kind}"
            )));
        }
    }
    let mut rows = Vec::new();
    for &probes in probes_values {
        for &estimator in estimators {
            let options = AssessOptions {
                probes_per_sentence: probes,
                estimator,
                thresholds: *thresholds,
            };
            let mut records: Vec<EvalRecord> = Vec::new();
            let mut failures: Vec<String> = Vec::new();
            for case in cases {
                let mut context = ProbeContext::new(case.id.clone(), case.report.clone());
                context.image_ref = case.image_ref.clone();
                match assess_report(
                    &case.report,
                    &context,
                    &options,
                    answers_config,
                    backend,
                    gateway,
                ) {
                    Ok(assessments) => {
                        if assessments.len() != case.sentence_labels.len() {
                            failures.push(format!(
                                "{}: {} sentences but {} labels",
                                case.id,
                                assessments.len(),
                                case.sentence_labels.len()
                            ));
                            continue;
                        }
                        for assessment in &assessments {
                            if let Some(entropy) = assessment.entropy_nats {
                                records.push(EvalRecord {
                                    id: format!("{}#{}", case.id, assessment.sentence_index),
                                    uncertainty: entropy,
                                    correct: !case.sentence_labels
                                        [assessment.sentence_index],
                                    estimator,
                                });
                            }
                        }
                    }
                    Err(e) => failures.push(format!("{}: {e}", case.id)),
                }
            }
            if records.is_empty() {
                return Err(UqError::BackendUnavailable(format!(
                    "every report failed at probes={probes}: {}",
                    failures.first().cloned().unwrap_or_default()
                )));
            }
            rows.push(row_from_records(
                AblationKnob::Probes,
                probes,
                estimator,
                &records,
                &failures,
                n_boot,
                seed,
            ));
        }
    }
    Ok(rows)
}
