//! Semantic-equivalence judging and greedy clustering of sampled
//! generations.
//!
//! A sample joins the first existing cluster (creation order) whose
//! representative it is equivalent to, else founds a new cluster. For
//! transitive judges this reproduces the connected components of the full
//! pairwise equivalence graph with O(M·|C|) judge calls; for NLI judges it
//! resolves non-transitivity deterministically by first match.
//!
//! Cluster masses are the log-sum-exp of member sequence log-probabilities
//! (the likelihood of the model emitting that meaning). Identical
//! normalized texts inside a cluster merge into one dedup member, so
//! unanimous agreement cannot register as high within-cluster entropy.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::gateway::SampleSet;
use crate::logmath::log_sum_exp;
use crate::text::{normalize_answer, normalize_text, AnswerLabel};

/// Semantic-equivalence function between two generations.
///
/// Implementations must be deterministic; reflexivity is guaranteed by the
/// byte-equality short-circuit in [`judge_equivalent`] regardless of the
/// underlying rule.
pub trait EquivalenceJudge: Send + Sync {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool>;
    fn name(&self) -> &'static str;
}

/// Which judge to construct; the CLI and FFI select by this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    BinaryRule,
    NormalizedExact,
    RemoteNli,
}

/// Equivalent iff both answers normalize to the same binary label; any
/// unknown is non-equivalent.
pub struct BinaryRuleJudge;

impl EquivalenceJudge for BinaryRuleJudge {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool> {
        let la = normalize_answer(a);
        let lb = normalize_answer(b);
        Ok(la != AnswerLabel::Unknown && la == lb)
    }

    fn name(&self) -> &'static str {
        "binary_rule"
    }
}

/// Equivalent iff the texts match after lowercasing and punctuation /
/// whitespace stripping.
pub struct NormalizedExactJudge;

impl EquivalenceJudge for NormalizedExactJudge {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool> {
        Ok(normalize_text(a) == normalize_text(b))
    }

    fn name(&self) -> &'static str {
        "normalized_exact"
    }
}

/// Bidirectional-entailment judge backed by a remote NLI endpoint.
///
/// POSTs `{premise, hypothesis}` and reads `{entailment, neutral,
/// contradiction}` scores; entailment holds iff it is the argmax. Two
/// texts are equivalent iff each entails the other.
pub struct RemoteNliJudge {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    attempts: u32,
    initial_backoff: Duration,
}

impl RemoteNliJudge {
    pub fn new(url: impl Into<String>) -> Self {
        RemoteNliJudge {
            url: url.into(),
            api_key: std::env::var(crate::gateway::ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }

    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        let body = serde_json::json!({ "premise": premise, "hypothesis": hypothesis });
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    let value: serde_json::Value = resp
                        .into_json()
                        .map_err(|e| UqError::RemoteJudgeUnavailable(e.to_string()))?;
                    let score = |k: &str| value.get(k).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
                    let (e, n, c) = (score("entailment"), score("neutral"), score("contradiction"));
                    if !e.is_finite() || !n.is_finite() || !c.is_finite() {
                        return Err(UqError::RemoteJudgeUnavailable(
                            "response missing entailment/neutral/contradiction scores".into(),
                        ));
                    }
                    return Ok(e > n && e > c);
                }
                Err(ureq::Error::Status(code, resp)) if (500..600).contains(&code) => {
                    last = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                }
                Err(ureq::Error::Status(code, resp)) => {
                    return Err(UqError::RemoteJudgeUnavailable(format!(
                        "HTTP {code}: {}",
                        resp.into_string().unwrap_or_default()
                    )));
                }
                Err(ureq::Error::Transport(t)) => last = t.to_string(),
            }
        }
        Err(UqError::RemoteJudgeUnavailable(format!(
            "{} attempts exhausted: {last}",
            self.attempts
        )))
    }
}

impl EquivalenceJudge for RemoteNliJudge {
    fn equivalent(&self, a: &str, b: &str) -> Result<bool> {
        Ok(self.entails(a, b)? && self.entails(b, a)?)
    }

    fn name(&self) -> &'static str {
        "remote_nli"
    }
}

/// Judge two texts for semantic equivalence.
///
/// Byte-identical texts are equivalent under every judge (reflexivity);
/// empty texts are rejected.
pub fn judge_equivalent(a: &str, b: &str, judge: &dyn EquivalenceJudge) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(UqError::InvalidInput(
            "judge_equivalent requires non-empty texts".into(),
        ));
    }
    if a == b {
        return Ok(true);
    }
    judge.equivalent(a, b)
}

/// How member sequence log-probabilities are derived from token log-probs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Sum of token log-probs (the literal product of token probabilities).
    #[default]
    Product,
    /// Mean token log-prob.
    LengthNormalized,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterOptions {
    /// Merge identical normalized texts within a cluster before entropy.
    pub merge_duplicates: bool,
    pub likelihood_mode: LikelihoodMode,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            merge_duplicates: true,
            likelihood_mode: LikelihoodMode::Product,
        }
    }
}

/// One distinct normalized text inside a cluster with its merged mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupMember {
    pub normalized_text: String,
    /// log-sum-exp of the duplicates' sequence log-probs; `None` when the
    /// sample set carries no likelihoods.
    pub log_prob: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCluster {
    pub member_indices: Vec<usize>,
    pub representative_index: usize,
    /// log-sum-exp of member sequence log-probs; `None` without likelihoods.
    pub log_mass: Option<f64>,
    pub dedup_members: Vec<DedupMember>,
}

/// A partition of a sample set into semantic clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<SemanticCluster>,
    pub sample_count: usize,
}

impl Clustering {
    pub fn has_likelihoods(&self) -> bool {
        self.clusters.iter().all(|c| c.log_mass.is_some())
    }

    /// Index of the highest-mass cluster (member count when likelihoods
    /// are absent); ties go to the earliest-founded cluster.
    pub fn dominant_cluster_index(&self) -> usize {
        let mut best = 0usize;
        for i in 1..self.clusters.len() {
            let better = if self.has_likelihoods() {
                self.clusters[i].log_mass.unwrap() > self.clusters[best].log_mass.unwrap()
            } else {
                self.clusters[i].member_indices.len() > self.clusters[best].member_indices.len()
            };
            if better {
                best = i;
            }
        }
        best
    }
}

/// Partition a sample set by greedy representative matching.
pub fn cluster(
    samples: &SampleSet,
    judge: &dyn EquivalenceJudge,
    options: &ClusterOptions,
) -> Result<Clustering> {
    if samples.samples.is_empty() {
        return Err(UqError::EmptySampleSet);
    }
    let texts: Vec<&str> = samples.samples.iter().map(|s| s.text.as_str()).collect();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let mut assigned = false;
        for cluster_members in members.iter_mut() {
            let rep = texts[cluster_members[0]];
            let equivalent = if text == &rep {
                true
            } else if text.is_empty() || rep.is_empty() {
                false
            } else {
                judge.equivalent(text, rep)?
            };
            if equivalent {
                cluster_members.push(i);
                assigned = true;
                break;
            }
        }
        if !assigned {
            members.push(vec![i]);
        }
    }

    let have_likelihoods = samples
        .samples
        .iter()
        .all(|s| s.sequence_logprob().is_some());
    let seq_logprob = |i: usize| -> Option<f64> {
        if !have_likelihoods {
            return None;
        }
        match options.likelihood_mode {
            LikelihoodMode::Product => samples.samples[i].sequence_logprob(),
            LikelihoodMode::LengthNormalized => samples.samples[i].mean_token_logprob(),
        }
    };

    let clusters = members
        .into_iter()
        .map(|member_indices| {
            let log_mass = if have_likelihoods {
                let lps: Vec<f64> =
                    member_indices.iter().map(|&i| seq_logprob(i).unwrap()).collect();
                Some(log_sum_exp(&lps))
            } else {
                None
            };
            let dedup_members = dedup(&member_indices, &texts, &seq_logprob, options);
            SemanticCluster {
                representative_index: member_indices[0],
                member_indices,
                log_mass,
                dedup_members,
            }
        })
        .collect();

    Ok(Clustering {
        clusters,
        sample_count: samples.samples.len(),
    })
}

fn dedup(
    member_indices: &[usize],
    texts: &[&str],
    seq_logprob: &dyn Fn(usize) -> Option<f64>,
    options: &ClusterOptions,
) -> Vec<DedupMember> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for &i in member_indices {
        let key = normalize_text(texts[i]);
        if options.merge_duplicates {
            if let Some(group) = groups.iter_mut().find(|(k, _)| *k == key) {
                group.1.push(i);
                continue;
            }
        }
        groups.push((key, vec![i]));
    }
    groups
        .into_iter()
        .map(|(normalized_text, indices)| {
            let log_prob = if indices.iter().all(|&i| seq_logprob(i).is_some()) {
                let lps: Vec<f64> = indices.iter().map(|&i| seq_logprob(i).unwrap()).collect();
                Some(log_sum_exp(&lps))
            } else {
                None
            };
            DedupMember {
                normalized_text,
                log_prob,
                count: indices.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FinishReason, GenerationSample, ProbeContext, SamplingConfig};

    pub(super) fn sample_set(texts_and_logprobs: &[(&str, f64)]) -> SampleSet {
        let samples = texts_and_logprobs
            .iter()
            .map(|(t, lp)| GenerationSample {
                text: (*t).to_string(),
                token_logprobs: vec![*lp],
                finish_reason: FinishReason::Stop,
            })
            .collect();
        SampleSet {
            context: ProbeContext::new("ctx", "query"),
            samples,
            sampling_config: SamplingConfig {
                m: texts_and_logprobs.len() as u32,
                ..Default::default()
            },
        }
    }

    #[test]
    fn binary_rule_label_matching() {
        let judge = BinaryRuleJudge;
        assert!(judge_equivalent("Yes.", "yes", &judge).unwrap());
        assert!(!judge_equivalent("yes", "no", &judge).unwrap());
        assert!(!judge_equivalent("maybe", "perhaps", &judge).unwrap());
    }

    #[test]
    fn normalized_exact_ignores_case_and_punctuation() {
        let judge = NormalizedExactJudge;
        assert!(
            judge_equivalent("The left lung is clear", "the left lung is clear.", &judge).unwrap()
        );
        assert!(!judge_equivalent("left lung clear", "right lung clear", &judge).unwrap());
    }

    #[test]
    fn reflexivity_holds_even_for_unknown_labels() {
        let judge = BinaryRuleJudge;
        assert!(judge_equivalent("hard to say", "hard to say", &judge).unwrap());
    }

    #[test]
    fn empty_text_rejected_by_judge_op() {
        let judge = BinaryRuleJudge;
        assert!(judge_equivalent("", "yes", &judge).is_err());
    }

    #[test]
    fn singleton_cluster_mass_is_its_sequence_logprob() {
        let set = sample_set(&[("yes", -2.3)]);
        let c = cluster(&set, &BinaryRuleJudge, &ClusterOptions::default()).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].member_indices, vec![0]);
        assert!((c.clusters[0].log_mass.unwrap() - (-2.3)).abs() < 1e-15);
    }

    #[test]
    fn greedy_assigns_first_match_and_merges_duplicates() {
        let set = sample_set(&[("Yes.", -1.0), ("yes", -2.0), ("no", -0.5)]);
        let c = cluster(&set, &BinaryRuleJudge, &ClusterOptions::default()).unwrap();
        assert_eq!(c.clusters.len(), 2);
        assert_eq!(c.clusters[0].member_indices, vec![0, 1]);
        assert_eq!(c.clusters[1].member_indices, vec![2]);
        // "Yes." and "yes" normalize identically, so they merge.
        assert_eq!(c.clusters[0].dedup_members.len(), 1);
        assert_eq!(c.clusters[0].dedup_members[0].count, 2);
        let merged = c.clusters[0].dedup_members[0].log_prob.unwrap();
        assert!((merged - log_sum_exp(&[-1.0, -2.0])).abs() < 1e-12);
    }

    #[test]
    fn byte_identical_samples_form_one_cluster_one_dedup_member() {
        let set = sample_set(&[("stable", -1.0), ("stable", -1.5), ("stable", -2.0)]);
        for judge in [&BinaryRuleJudge as &dyn EquivalenceJudge, &NormalizedExactJudge] {
            let c = cluster(&set, judge, &ClusterOptions::default()).unwrap();
            assert_eq!(c.clusters.len(), 1, "judge {}", judge.name());
            assert_eq!(c.clusters[0].dedup_members.len(), 1);
            assert_eq!(c.clusters[0].dedup_members[0].count, 3);
        }
    }

    #[test]
    fn merge_duplicates_can_be_disabled() {
        let set = sample_set(&[("yes", -1.0), ("Yes.", -1.0)]);
        let options = ClusterOptions { merge_duplicates: false, ..Default::default() };
        let c = cluster(&set, &BinaryRuleJudge, &options).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].dedup_members.len(), 2);
    }

    #[test]
    fn missing_likelihoods_leave_masses_unset() {
        let mut set = sample_set(&[("yes", -1.0), ("no", -2.0)]);
        set.samples[1].token_logprobs.clear();
        let c = cluster(&set, &BinaryRuleJudge, &ClusterOptions::default()).unwrap();
        assert!(!c.has_likelihoods());
        assert!(c.clusters.iter().all(|cl| cl.log_mass.is_none()));
    }

    #[test]
    fn empty_sample_set_rejected() {
        let set = sample_set(&[]);
        assert!(matches!(
            cluster(&set, &BinaryRuleJudge, &ClusterOptions::default()),
            Err(UqError::EmptySampleSet)
        ));
    }

    #[test]
    fn length_normalized_mode_uses_mean_token_logprob() {
        let mut set = sample_set(&[("yes", -1.0)]);
        set.samples[0].token_logprobs = vec![-1.0, -3.0];
        let options = ClusterOptions {
            likelihood_mode: LikelihoodMode::LengthNormalized,
            ..Default::default()
        };
        let c = cluster(&set, &BinaryRuleJudge, &options).unwrap();
        assert!((c.clusters[0].log_mass.unwrap() - (-2.0)).abs() < 1e-15);
    }

    #[test]
    fn dominant_cluster_prefers_mass_then_first() {
        let set = sample_set(&[("yes", -3.0), ("no", -0.5), ("yes", -3.0)]);
        let c = cluster(&set, &BinaryRuleJudge, &ClusterOptions::default()).unwrap();
        // yes-cluster mass = lse(-3,-3) ~ -2.31; no-cluster -0.5 wins.
        assert_eq!(c.dominant_cluster_index(), 1);
    }
}
