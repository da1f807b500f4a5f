//! Exact computations on small finite spaces.

mod diagnostics;
mod exact;
mod game;
mod prop1;

pub use diagnostics::{consistency_diagnostics, model_joints, ConsistencyDiagnostics, ModelJoints};
pub use exact::{enumerate_term, exact_player_estimate, exact_plan_utility, exact_player_estimate_split};
pub use game::{
    dual_solve, exact_gradients, exact_utilities, realize, solve_equilibrium, DualSolveReport, SolveMode,
    SolveOptions, SolveTrace, TabularGameSpec, TabularParams,
};
pub use prop1::{decoder_utility, lp_prime_direct, lp_prime_elbo, lp_prime_gradient, prop1_residual, TabularDecoder};

use crate::error::{invalid, Result};

/// Largest number of states any exact computation enumerates.
pub const SUPPORT_CAP: usize = 1 << 16;

/// A probability vector over an enumerated space (for joints, index
/// `x * nz + z`).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDist {
    pub probs: Vec<f64>,
}

impl TabularDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return invalid("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return invalid("weights must have a positive finite sum");
        }
        Self::new(w.into_iter().map(|x| x / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `E[f]` for a statistic table with `dim` columns per state.
    pub fn expect(&self, table: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (s, p) in self.probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            for (o, f) in out.iter_mut().zip(&table[s * dim..(s + 1) * dim]) {
                *o += p * f;
            }
        }
        out
    }
}

/// `KL(a || b)`; `+inf` when `a` puts mass where `b` has none.
pub fn kl(a: &TabularDist, b: &TabularDist) -> f64 {
    kl_slices(&a.probs, &b.probs)
}

pub(crate) fn kl_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        if *pa == 0.0 {
            continue;
        }
        if *pb == 0.0 {
            return f64::INFINITY;
        }
        total += pa * (pa / pb).ln();
    }
    total.max(0.0)
}

/// Total-variation distance.
pub fn tv(a: &TabularDist, b: &TabularDist) -> f64 {
    0.5 * a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
