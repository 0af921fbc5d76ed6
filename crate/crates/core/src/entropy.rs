//! Semantic-entropy estimators over a [`Clustering`].
//!
//! Four variants:
//! - `discrete`: entropy of cluster sample counts, no likelihoods needed.
//! - `rao_blackwell`: entropy of normalized cluster likelihood masses.
//!   Degenerates to 0 whenever every sample lands in one cluster, however
//!   uneven the member likelihoods are.
//! - `within_only`: mass-weighted sum of within-cluster entropies, the
//!   correction that stays informative in the single-cluster case.
//! - `combined`: `rao_blackwell + within_only`. This is the crate default
//!   downstream: `within_only` alone scores all-singleton clusterings
//!   (maximal disagreement) as zero, `rao_blackwell` alone scores
//!   single-cluster sets as zero; the sum preserves both signals.
//!
//! Everything is computed in natural-log space and reported in nats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{Clustering, SemanticCluster};
use crate::error::{Result, UqError};
use crate::logmath::entropy_from_log_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Discrete,
    RaoBlackwell,
    WithinOnly,
    Combined,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Discrete,
        EstimatorKind::RaoBlackwell,
        EstimatorKind::WithinOnly,
        EstimatorKind::Combined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Discrete => "discrete",
            EstimatorKind::RaoBlackwell => "rao_blackwell",
            EstimatorKind::WithinOnly => "within_only",
            EstimatorKind::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(EstimatorKind::Discrete),
            "rao_blackwell" => Ok(EstimatorKind::RaoBlackwell),
            "within_only" => Ok(EstimatorKind::WithinOnly),
            "combined" => Ok(EstimatorKind::Combined),
            other => Err(UqError::InvalidConfig(format!(
                "unknown estimator {other:?} (expected discrete|rao_blackwell|within_only|combined)"
            ))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_nonempty(clustering: &Clustering) -> Result<()> {
    if clustering.clusters.is_empty() || clustering.sample_count == 0 {
        return Err(UqError::InvalidInput("clustering has no clusters".into()));
    }
    Ok(())
}

/// Entropy of cluster probabilities estimated from sample counts.
pub fn discrete_entropy(clustering: &Clustering) -> Result<f64> {
    check_nonempty(clustering)?;
    let m = clustering.sample_count as f64;
    let log_weights: Vec<f64> = clustering
        .clusters
        .iter()
        .map(|c| (c.member_indices.len() as f64 / m).ln())
        .collect();
    Ok(entropy_from_log_weights(&log_weights))
}

/// Per-cluster log masses (log-sum-exp of member sequence log-probs).
pub fn cluster_log_masses(clustering: &Clustering) -> Result<Vec<f64>> {
    check_nonempty(clustering)?;
    clustering
        .clusters
        .iter()
        .map(|c| c.log_mass.ok_or(UqError::MissingLikelihoods))
        .collect()
}

/// Entropy of normalized cluster likelihood masses.
pub fn rao_blackwell_entropy(clustering: &Clustering) -> Result<f64> {
    let masses = cluster_log_masses(clustering)?;
    Ok(entropy_from_log_weights(&masses))
}

/// Entropy of the normalized sequence-probability distribution inside one
/// cluster, over its dedup members.
pub fn within_cluster_entropy(cluster: &SemanticCluster) -> Result<f64> {
    if cluster.dedup_members.is_empty() {
        return Err(UqError::InvalidInput("cluster has no dedup members".into()));
    }
    let log_weights: Vec<f64> = cluster
        .dedup_members
        .iter()
        .map(|d| d.log_prob.ok_or(UqError::MissingLikelihoods))
        .collect::<Result<_>>()?;
    Ok(entropy_from_log_weights(&log_weights))
}

/// The small-M corrected estimators: `within_only` is the mass-weighted
/// within-cluster entropy sum; `combined` adds the cross-cluster
/// Rao-Blackwell term.
pub fn corrected_entropy(clustering: &Clustering, kind: EstimatorKind) -> Result<f64> {
    if !matches!(kind, EstimatorKind::WithinOnly | EstimatorKind::Combined) {
        return Err(UqError::InvalidInput(format!(
            "corrected_entropy expects within_only or combined, got {kind}"
        )));
    }
    let masses = cluster_log_masses(clustering)?;
    let total = crate::logmath::log_sum_exp(&masses);
    let mut weighted_within = 0.0;
    for (cluster, &log_mass) in clustering.clusters.iter().zip(masses.iter()) {
        let weight = (log_mass - total).exp();
        if weight > 0.0 {
            weighted_within += weight * within_cluster_entropy(cluster)?;
        }
    }
    match kind {
        EstimatorKind::WithinOnly => Ok(weighted_within),
        EstimatorKind::Combined => Ok(rao_blackwell_entropy(clustering)? + weighted_within),
        _ => unreachable!(),
    }
}

/// Values of every estimator for one clustering; likelihood-based entries
/// are `None` when the samples carried no log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorValues {
    pub discrete: f64,
    pub rao_blackwell: Option<f64>,
    pub within_only: Option<f64>,
    pub combined: Option<f64>,
}

impl EstimatorValues {
    pub fn get(&self, kind: EstimatorKind) -> Option<f64> {
        match kind {
            EstimatorKind::Discrete => Some(self.discrete),
            EstimatorKind::RaoBlackwell => self.rao_blackwell,
            EstimatorKind::WithinOnly => self.within_only,
            EstimatorKind::Combined => self.combined,
        }
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, Option<f64>> {
        EstimatorKind::ALL
            .iter()
            .map(|k| (k.as_str(), self.get(*k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub context_id: String,
    pub m: usize,
    pub cluster_count: usize,
    pub values: EstimatorValues,
    /// (cluster index, H_c in nats); empty without likelihoods.
    pub per_cluster_within: Vec<(usize, f64)>,
}

/// Compute every estimator; absent likelihoods mark the likelihood-based
/// values as missing rather than failing.
pub fn entropy_report(clustering: &Clustering, context_id: &str) -> Result<EntropyReport> {
    check_nonempty(clustering)?;
    let discrete = discrete_entropy(clustering)?;
    let (rao_blackwell, within_only, combined, per_cluster_within) =
        if clustering.has_likelihoods() {
            let per: Vec<(usize, f64)> = clustering
                .clusters
                .iter()
                .enumerate()
                .map(|(i, c)| Ok((i, within_cluster_entropy(c)?)))
                .collect::<Result<_>>()?;
            (
                Some(rao_blackwell_entropy(clustering)?),
                Some(corrected_entropy(clustering, EstimatorKind::WithinOnly)?),
                Some(corrected_entropy(clustering, EstimatorKind::Combined)?),
                per,
            )
        } else {
            (None, None, None, Vec::new())
        };
    Ok(EntropyReport {
        context_id: context_id.to_string(),
        m: clustering.sample_count,
        cluster_count: clustering.clusters.len(),
        values: EstimatorValues {
            discrete,
            rao_blackwell,
            within_only,
            combined,
        },
        per_cluster_within,
    })
}
