//! Direct-preference-optimization kernel: preference-pair construction
//! from scored candidates and the DPO loss with analytic gradients.
//!
//! No parameter updates happen here — the module is a verifiable
//! loss/dataset kernel. Sequence log-probabilities under policy and
//! reference arrive precomputed (summed token log-probs).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::logmath::{neg_log_sigmoid, sigmoid};
use crate::text::normalize_text;

/// A candidate generation with its score and log-probs under both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGeneration {
    pub text: String,
    pub policy_logprob: f64,
    pub reference_logprob: f64,
    /// Report-quality score in [0, 1].
    pub score: f64,
}

impl ScoredGeneration {
    pub fn validate(&self) -> Result<()> {
        if !self.policy_logprob.is_finite() || !self.reference_logprob.is_finite() {
            return Err(UqError::InvalidInput("log-probs must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(UqError::InvalidInput(format!(
                "score must be in [0, 1], got {}",
                self.score
            )));
        }
        Ok(())
    }

    /// log(pi_theta / pi_ref) for this generation.
    pub fn log_ratio(&self) -> f64 {
        self.policy_logprob - self.reference_logprob
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner: ScoredGeneration,
    pub loser: ScoredGeneration,
    /// Derived on construction; optional on input.
    #[serde(default)]
    pub score_gap: f64,
}

impl PreferencePair {
    pub fn new(
        prompt_id: impl Into<String>,
        winner: ScoredGeneration,
        loser: ScoredGeneration,
    ) -> Result<Self> {
        winner.validate()?;
        loser.validate()?;
        if winner.score <= loser.score {
            return Err(UqError::InvalidInput(format!(
                "winner score {} must exceed loser score {}",
                winner.score, loser.score
            )));
        }
        let score_gap = winner.score - loser.score;
        Ok(PreferencePair {
            prompt_id: prompt_id.into(),
            winner,
            loser,
            score_gap,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Deviation-control coefficient on the log-ratio margin.
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(UqError::InvalidConfig(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Pluggable report-quality scorer used for pair construction.
pub trait ReportScorer: Send + Sync {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64>;
    fn name(&self) -> &'static str;
}

/// Bag-of-tokens F1 against the reference text after lowercasing and
/// punctuation stripping. Duplicate tokens count with multiplicity.
pub struct TokenF1Scorer;

impl ReportScorer for TokenF1Scorer {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64> {
        Ok(token_f1(candidate, reference))
    }

    fn name(&self) -> &'static str {
        "token_f1"
    }
}

fn token_counts(text: &str) -> std::collections::BTreeMap<String, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for token in normalize_text(text).split(' ').filter(|t| !t.is_empty()) {
        *counts.entry(token.to_string()).or_insert(0) += 1;
    }
    counts
}

fn token_f1(candidate: &str, reference: &str) -> f64 {
    let cand = token_counts(candidate);
    let refr = token_counts(reference);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let overlap: usize = cand
        .iter()
        .map(|(t, &c)| c.min(refr.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / cand_total as f64;
    let recall = overlap as f64 / ref_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Posts `{text}` to a labeler endpoint returning `{"labels": [...]}` and
/// scores label-set F1 between candidate and reference label sets.
pub struct ExternalLabelerScorer {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl ExternalLabelerScorer {
    pub fn new(url: impl Into<String>) -> Self {
        ExternalLabelerScorer {
            url: url.into(),
            api_key: std::env::var(crate::gateway::ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        }
    }

    fn labels(&self, text: &str) -> Result<std::collections::BTreeSet<String>> {
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(serde_json::json!({ "text": text }))
            .map_err(|e| UqError::ScorerUnavailable(e.to_string()))?;
        let value: serde_json::Value = resp
            .into_json()
            .map_err(|e| UqError::ScorerUnavailable(e.to_string()))?;
        let labels = value
            .get("labels")
            .and_then(|l| l.as_array())
            .ok_or_else(|| UqError::ScorerUnavailable("response missing labels".into()))?;
        Ok(labels
            .iter()
            .filter_map(|l| l.as_str().map(str::to_string))
            .collect())
    }
}

impl ReportScorer for ExternalLabelerScorer {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64> {
        let cand = self.labels(candidate)?;
        let refr = self.labels(reference)?;
        if cand.is_empty() || refr.is_empty() {
            return Ok(0.0);
        }
        let overlap = cand.intersection(&refr).count() as f64;
        if overlap == 0.0 {
            return Ok(0.0);
        }
        let precision = overlap / cand.len() as f64;
        let recall = overlap / refr.len() as f64;
        Ok(2.0 * precision * recall / (precision + recall))
    }

    fn name(&self) -> &'static str {
        "external_labeler"
    }
}

/// Score one candidate against the reference.
pub fn score_generation(
    candidate: &str,
    reference: &str,
    scorer: &dyn ReportScorer,
) -> Result<f64> {
    if reference.trim().is_empty() {
        return Err(UqError::InvalidInput("reference is empty".into()));
    }
    scorer.score(candidate, reference)
}

/// Pick (winner, loser) from K scored candidates.
///
/// Winner is the first candidate attaining the maximum score, loser the
/// first attaining the minimum; the pair is emitted only when the gap
/// strictly exceeds `min_gap` (ties therefore emit nothing).
pub fn build_pairs(
    prompt_id: &str,
    candidates: &[ScoredGeneration],
    min_gap: f64,
) -> Result<Option<PreferencePair>> {
    if candidates.len() < 2 {
        return Err(UqError::TooFewCandidates {
            got: candidates.len(),
        });
    }
    for c in candidates {
        c.validate()?;
    }
    let mut winner = 0usize;
    let mut loser = 0usize;
    for (i, c) in candidates.iter().enumerate() {
        if c.score > candidates[winner].score {
            winner = i;
        }
        if c.score < candidates[loser].score {
            loser = i;
        }
    }
    let gap = candidates[winner].score - candidates[loser].score;
    if gap <= min_gap {
        return Ok(None);
    }
    Ok(Some(PreferencePair::new(
        prompt_id,
        candidates[winner].clone(),
        candidates[loser].clone(),
    )?))
}

/// The DPO margin: beta * (winner log-ratio - loser log-ratio).
pub fn dpo_margin(pair: &PreferencePair, config: &DpoConfig) -> f64 {
    config.beta * (pair.winner.log_ratio() - pair.loser.log_ratio())
}

/// -ln sigmoid(beta * margin), via the stable ln(1 + e^(-x)) form.
pub fn dpo_loss(pair: &PreferencePair, config: &DpoConfig) -> f64 {
    neg_log_sigmoid(dpo_margin(pair, config))
}

/// Gradient of the mean batch loss w.r.t. one pair's policy log-probs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGradient {
    pub winner_policy: f64,
    pub loser_policy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoBatchResult {
    pub mean_loss: f64,
    pub per_pair_losses: Vec<f64>,
    pub gradients: Vec<PairGradient>,
}

/// Mean loss over a batch plus analytic gradients:
/// d(mean)/d(winner.policy_logprob) = -beta * sigmoid(-margin) / N,
/// d(mean)/d(loser.policy_logprob)  = +beta * sigmoid(-margin) / N.
pub fn dpo_batch_loss(pairs: &[PreferencePair], config: &DpoConfig) -> Result<DpoBatchResult> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(UqError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let mut per_pair_losses = Vec::with_capacity(pairs.len());
    let mut gradients = Vec::with_capacity(pairs.len());
    let mut sum = 0.0;
    for pair in pairs {
        let margin = dpo_margin(pair, config);
        let loss = neg_log_sigmoid(margin);
        sum += loss;
        per_pair_losses.push(loss);
        let slope = config.beta * sigmoid(-margin) / n;
        gradients.push(PairGradient {
            winner_policy: -slope,
            loser_policy: slope,
        });
    }
    Ok(DpoBatchResult {
        mean_loss: sum / n,
        per_pair_losses,
        gradients,
    })
}

/// JSONL shape for unscored candidate sets entering pair construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub candidates: Vec<CandidateGeneration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateGeneration {
    pub text: String,
    pub policy_logprob: f64,
    pub reference_logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}
