//! Log-space numeric primitives shared by the entropy estimators.
//!
//! Sequence probabilities are products of per-token probabilities and
//! underflow `f64` routinely, so every mass in this crate lives in
//! natural-log space and only leaves it through [`log_sum_exp`] /
//! [`entropy_from_log_weights`].

/// ln(sum(exp(values))) without overflow/underflow.
///
/// Empty input and all-`-inf` input both return `-inf` (log of zero mass).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument log-sum-exp, handy for incremental accumulation.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Shannon entropy (nats) of the distribution obtained by normalizing
/// `exp(log_weights)`.
///
/// The 0·ln 0 term is taken as 0: a weight of `-inf` contributes nothing.
/// Returns 0 for a single weight. All finite results are clamped at 0 so
/// round-off never produces a tiny negative entropy.
pub fn entropy_from_log_weights(log_weights: &[f64]) -> f64 {
    let total = log_sum_exp(log_weights);
    if total == f64::NEG_INFINITY {
        return 0.0;
    }
    let mut h = 0.0;
    for &lw in log_weights {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let log_p = lw - total;
        h -= log_p.exp() * log_p;
    }
    h.max(0.0)
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -ln(sigmoid(x)) = ln(1 + exp(-x)), computed without overflow for
/// large negative `x`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Nats → bits.
pub const NATS_TO_BITS: f64 = std::f64::consts::LOG2_E;
