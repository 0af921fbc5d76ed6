//! Sentence-level uncertainty for long-form generated reports.
//!
//! Each sentence is turned into binary VQA probes; sampled answers are
//! split into two clusters (C1 = matches the probe's expected answer,
//! C0 = everything else, unknowns included), and the mass-weighted
//! within-cluster entropy — optionally plus the binary cross-cluster term —
//! becomes the sentence's uncertainty. A two-threshold index maps entropy
//! onto high / medium / low reliability for triage.

mod segment;

pub use segment::{decompose, segment_report, ReportDecomposition, SentenceSpan};

use serde::{Deserialize, Serialize};

use crate::clustering::DedupMember;
use crate::entropy::EstimatorKind;
use crate::error::{Result, UqError};
use crate::gateway::{
    answer_probe_at, generate_probes, CompletionBackend, ExpectedAnswer, GatewayOptions,
    ProbeContext, SampleSet, SamplingConfig, VQAProbe,
};
use crate::logmath::{entropy_from_log_weights, log_sum_exp};
use crate::text::{normalize_answer, normalize_text, AnswerLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    High,
    Medium,
    Low,
}

impl Reliability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reliability::High => "high",
            Reliability::Medium => "medium",
            Reliability::Low => "low",
        }
    }
}

/// Entropy cutoffs (nats) between the three reliability levels.
/// Defaults roughly trisect [0, ln 2]; `uq calibrate-thresholds` fits them
/// to a labeled validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityThresholds {
    pub theta_high: f64,
    pub theta_low: f64,
}

impl Default for ReliabilityThresholds {
    fn default() -> Self {
        ReliabilityThresholds {
            theta_high: 0.25,
            theta_low: 0.55,
        }
    }
}

impl ReliabilityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_high.is_finite() && self.theta_low.is_finite())
            || self.theta_high < 0.0
            || self.theta_high >= self.theta_low
        {
            return Err(UqError::InvalidThresholds(format!(
                "need 0 <= theta_high < theta_low, got ({}, {})",
                self.theta_high, self.theta_low
            )));
        }
        Ok(())
    }
}

/// Map a sentence entropy onto the three-level reliability index.
pub fn reliability_index(
    entropy: f64,
    thresholds: &ReliabilityThresholds,
) -> Result<Reliability> {
    thresholds.validate()?;
    if !entropy.is_finite() || entropy < 0.0 {
        return Err(UqError::InvalidInput(format!(
            "entropy must be finite and >= 0, got {entropy}"
        )));
    }
    Ok(if entropy < thresholds.theta_high {
        Reliability::High
    } else if entropy < thresholds.theta_low {
        Reliability::Medium
    } else {
        Reliability::Low
    })
}

/// One side of the binary split with its mass and dedup members.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinarySide {
    /// `None` when the side is empty.
    pub log_mass: Option<f64>,
    pub dedup_members: Vec<DedupMember>,
    pub count: usize,
}

/// The two-group clustering of probe answers for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryClusters {
    /// Non-equivalent answers (wrong label or unparseable).
    pub c0: BinarySide,
    /// Answers matching the probe's expected label.
    pub c1: BinarySide,
}

/// Split all sampled answers across probes into C0/C1.
///
/// Answers are weighted by sequence likelihood; when any answer lacks
/// log-probs every answer falls back to unit weight, so masses degrade to
/// counts rather than failing the sentence.
pub fn binary_cluster(probe_answers: &[(VQAProbe, SampleSet)]) -> Result<BinaryClusters> {
    let total_answers: usize = probe_answers.iter().map(|(_, s)| s.samples.len()).sum();
    if total_answers == 0 {
        return Err(UqError::NoParseableAnswers);
    }
    let weighted = probe_answers
        .iter()
        .all(|(_, s)| s.samples.iter().all(|a| a.sequence_logprob().is_some()));

    let mut sides = [Vec::new(), Vec::new()]; // (normalized text, log weight)
    for (probe, answers) in probe_answers {
        for sample in &answers.samples {
            let label = normalize_answer(&sample.text);
            let side = usize::from(label == probe.expected_answer.as_label());
            let log_weight = if weighted {
                sample.sequence_logprob().unwrap()
            } else {
                0.0
            };
            sides[side].push((normalize_text(&sample.text), log_weight));
        }
    }

    let build = |entries: &[(String, f64)]| -> BinarySide {
        if entries.is_empty() {
            return BinarySide::default();
        }
        let mut dedup: Vec<(String, Vec<f64>)> = Vec::new();
        for (key, lw) in entries {
            match dedup.iter_mut().find(|(k, _)| k == key) {
                Some((_, lws)) => lws.push(*lw),
                None => dedup.push((key.clone(), vec![*lw])),
            }
        }
        let dedup_members: Vec<DedupMember> = dedup
            .into_iter()
            .map(|(normalized_text, lws)| DedupMember {
                normalized_text,
                log_prob: Some(log_sum_exp(&lws)),
                count: lws.len(),
            })
            .collect();
        let all: Vec<f64> = entries.iter().map(|(_, lw)| *lw).collect();
        BinarySide {
            log_mass: Some(log_sum_exp(&all)),
            count: entries.len(),
            dedup_members,
        }
    };

    Ok(BinaryClusters {
        c0: build(&sides[0]),
        c1: build(&sides[1]),
    })
}

fn side_within_entropy(side: &BinarySide) -> f64 {
    let lws: Vec<f64> = side
        .dedup_members
        .iter()
        .filter_map(|d| d.log_prob)
        .collect();
    entropy_from_log_weights(&lws)
}

/// Sentence entropy from the binary clustering.
///
/// `within_only` is the mass-weighted within-cluster entropy sum;
/// `combined` adds the cross-cluster entropy of the normalized (p0, p1)
/// masses. Empty sides contribute zero weight.
pub fn sentence_entropy(clusters: &BinaryClusters, kind: EstimatorKind) -> Result<f64> {
    if !matches!(kind, EstimatorKind::WithinOnly | EstimatorKind::Combined) {
        return Err(UqError::InvalidInput(format!(
            "sentence_entropy expects within_only or combined, got {kind}"
        )));
    }
    let sides = [&clusters.c0, &clusters.c1];
    let present: Vec<(&BinarySide, f64)> = sides
        .iter()
        .filter_map(|s| s.log_mass.map(|lm| (*s, lm)))
        .collect();
    if present.is_empty() {
        return Err(UqError::NoParseableAnswers);
    }
    let masses: Vec<f64> = present.iter().map(|(_, lm)| *lm).collect();
    let total = log_sum_exp(&masses);
    let mut h = 0.0;
    for (side, log_mass) in &present {
        let weight = (log_mass - total).exp();
        if weight > 0.0 {
            h += weight * side_within_entropy(side);
        }
    }
    if kind == EstimatorKind::Combined {
        h += entropy_from_log_weights(&masses);
    }
    Ok(h)
}

/// One sampled answer in the serialized assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAnswer {
    pub text: String,
    pub label: AnswerLabel,
    /// 0 = non-equivalent cluster, 1 = equivalent cluster.
    pub c: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub question: String,
    pub expected: ExpectedAnswer,
    pub answers: Vec<ProbeAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceAssessment {
    pub sentence_index: usize,
    pub text: String,
    /// `None` when no probe produced answers for this sentence.
    pub entropy_nats: Option<f64>,
    pub reliability: Reliability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0_log_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1_log_mass: Option<f64>,
    pub probes: Vec<ProbeOutcome>,
    pub probes_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAssessment {
    pub report_id: String,
    pub sentences: Vec<SentenceAssessment>,
}

/// Assessment knobs.
#[derive(Debug, Clone, Copy)]
pub struct AssessOptions {
    pub probes_per_sentence: u32,
    pub estimator: EstimatorKind,
    pub thresholds: ReliabilityThresholds,
}

impl Default for AssessOptions {
    fn default() -> Self {
        AssessOptions {
            probes_per_sentence: 3,
            estimator: EstimatorKind::Combined,
            thresholds: ReliabilityThresholds::default(),
        }
    }
}

/// Full per-sentence pipeline: segment, probe, answer, cluster, score.
///
/// Individual probe failures degrade the sentence to fewer probes; a
/// sentence with no surviving probes is marked unverifiable (entropy
/// `None`, reliability low). Only a report where every sentence lost
/// every probe aborts with `BackendUnavailable`.
///
/// `config.m` is the number of sampled answers per probe.
pub fn assess_report(
    report: &str,
    context: &ProbeContext,
    options: &AssessOptions,
    config: &SamplingConfig,
    backend: &dyn CompletionBackend,
    gateway: &GatewayOptions,
) -> Result<Vec<SentenceAssessment>> {
    if options.probes_per_sentence == 0 {
        return Err(UqError::InvalidConfig("probes_per_sentence must be >= 1".into()));
    }
    options.thresholds.validate()?;
    config.validate()?;
    let sentences = segment_report(report)?;

    let mut assessments = Vec::with_capacity(sentences.len());
    let mut any_success = false;
    for (index, span) in sentences.iter().enumerate() {
        let probes = match generate_probes(&span.text, index, options.probes_per_sentence, backend)
        {
            Ok(probes) => probes,
            // degrade to the deterministic template rather than abort
            Err(_) => (0..options.probes_per_sentence)
                .map(|_| crate::gateway::template_probe(&span.text, index))
                .collect(),
        };

        let mut collected: Vec<(VQAProbe, SampleSet)> = Vec::new();
        let mut failed = 0usize;
        for (j, probe) in probes.into_iter().enumerate() {
            let base_index = j * config.m as usize;
            match answer_probe_at(&probe, context, config, backend, gateway, base_index) {
                Ok(answers) => collected.push((probe, answers)),
                Err(_) => failed += 1,
            }
        }

        let assessment = if collected.is_empty() {
            SentenceAssessment {
                sentence_index: index,
                text: span.text.clone(),
                entropy_nats: None,
                reliability: Reliability::Low,
                c0_log_mass: None,
                c1_log_mass: None,
                probes: Vec::new(),
                probes_failed: failed,
            }
        } else {
            any_success = true;
            let clusters = binary_cluster(&collected)?;
            let entropy = sentence_entropy(&clusters, options.estimator)?;
            let reliability = reliability_index(entropy, &options.thresholds)?;
            let probes = collected
                .iter()
                .map(|(probe, answers)| ProbeOutcome {
                    question: probe.question.clone(),
                    expected: probe.expected_answer,
                    answers: answers
                        .samples
                        .iter()
                        .map(|s| {
                            let label = normalize_answer(&s.text);
                            ProbeAnswer {
                                text: s.text.clone(),
                                label,
                                c: u8::from(label == probe.expected_answer.as_label()),
                                sequence_logprob: s.sequence_logprob(),
                            }
                        })
                        .collect(),
                })
                .collect();
            SentenceAssessment {
                sentence_index: index,
                text: span.text.clone(),
                entropy_nats: Some(entropy),
                reliability,
                c0_log_mass: clusters.c0.log_mass,
                c1_log_mass: clusters.c1.log_mass,
                probes,
                probes_failed: failed,
            }
        };
        assessments.push(assessment);
    }

    if !any_success {
        return Err(UqError::BackendUnavailable(
            "no probe succeeded for any sentence".into(),
        ));
    }
    Ok(assessments)
}

/// Fit (theta_high, theta_low) to labeled sentences by maximizing
/// three-way balanced accuracy (mean per-class recall). Candidate cuts are
/// midpoints between consecutive distinct entropies; ties keep the
/// numerically smallest pair.
pub fn calibrate_thresholds(labeled: &[(f64, Reliability)]) -> Result<ReliabilityThresholds> {
    if labeled.is_empty() {
        return Err(UqError::InvalidInput("no labeled records".into()));
    }
    if labeled.iter().any(|(e, _)| !e.is_finite() || *e < 0.0) {
        return Err(UqError::InvalidInput("entropies must be finite and >= 0".into()));
    }
    let mut values: Vec<f64> = labeled.iter().map(|(e, _)| *e).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut cuts = vec![0.0];
    cuts.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cuts.push(values.last().unwrap() + 1e-6);

    let score = |thresholds: &ReliabilityThresholds| -> f64 {
        let mut hits = [0usize; 3];
        let mut totals = [0usize; 3];
        for (entropy, label) in labeled {
            let class = *label as usize;
            totals[class] += 1;
            let predicted = reliability_index(*entropy, thresholds).unwrap();
            if predicted == *label {
                hits[class] += 1;
            }
        }
        let mut acc = 0.0;
        let mut present = 0.0;
        for c in 0..3 {
            if totals[c] > 0 {
                acc += hits[c] as f64 / totals[c] as f64;
                present += 1.0;
            }
        }
        acc / present
    };

    let mut best: Option<(f64, ReliabilityThresholds)> = None;
    for (i, &high) in cuts.iter().enumerate() {
        for &low in cuts.iter().skip(i + 1) {
            let candidate = ReliabilityThresholds {
                theta_high: high,
                theta_low: low,
            };
            if candidate.validate().is_err() {
                continue;
            }
            let s = score(&candidate);
            let better = match &best {
                None => true,
                Some((best_s, _)) => s > *best_s + 1e-12,
            };
            if better {
                best = Some((s, candidate));
            }
        }
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| UqError::InvalidInput("could not fit thresholds".into()))
}
