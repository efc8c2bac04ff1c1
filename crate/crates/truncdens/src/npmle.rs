//! NPMLE of the cumulative distribution under double truncation.
//!
//! The estimator maximizes the conditional likelihood of the observed values
//! given their truncation limits, `prod_i dF(x_i) / (F(v_i) - F(u_i-))`, over
//! all distributions supported on the observed points. The solver runs the
//! self-consistency (EM-type) fixed point: with `J[i][j] = I[u_i <= x_j <= v_i]`
//! and `F_j = sum_m J[j][m] f_m`,
//!
//! ```text
//! f_i <- 1 / sum_j (J[j][i] / F_j),   then normalize to sum 1.
//! ```
//!
//! The iteration is monotone in the likelihood and needs no line search. An
//! interior maximizer exists exactly when the truncation graph is strongly
//! connected; on data where it is not, the iteration drifts toward the
//! boundary of the simplex and a mass-change tolerance can trigger at a
//! pseudo-fixed point, so `converged` additionally requires the existence
//! condition to hold.

use crate::graph::{npmle_status, NpmleExistence};
use crate::model::{EvalGrid, TruncatedSample};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum NpmleError {
    #[error("interval probability underflowed to zero for record {0} (numerical degeneration)")]
    SingularDenominator(usize),
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Default mass threshold above which a single atom is considered degenerate.
pub const DEFAULT_DEGENERACY_THRESHOLD: f64 = 0.5;

/// Probability masses at the observed points maximizing the conditional
/// likelihood, with solver diagnostics.
#[derive(Debug, Clone)]
pub struct NpmleWeights {
    masses: Vec<f64>,
    iterations: usize,
    converged: bool,
    log_likelihood: f64,
    log_lik_trace: Vec<f64>,
}

impl NpmleWeights {
    /// Uniform masses `1/n`; with these the weighted kernel estimator reduces
    /// to the standard one.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Self {
            masses: vec![1.0 / n as f64; n],
            iterations: 0,
            converged: true,
            log_likelihood: 0.0,
            log_lik_trace: Vec::new(),
        }
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Log-likelihood recorded at the start of every iteration plus the final
    /// value; non-decreasing for the self-consistency update.
    pub fn log_lik_trace(&self) -> &[f64] {
        &self.log_lik_trace
    }
}

#[cfg(test)]
impl NpmleWeights {
    pub(crate) fn test_with_masses(masses: Vec<f64>) -> Self {
        Self {
            masses,
            iterations: 0,
            converged: true,
            log_likelihood: 0.0,
            log_lik_trace: Vec::new(),
        }
    }

    pub(crate) fn set_converged_for_tests(&mut self, converged: bool) {
        self.converged = converged;
    }
}

/// Indicator matrix `J[i][j] = I[u_i <= x_j <= v_i]` stored row-major.
struct Indicator {
    n: usize,
    bits: Vec<bool>,
}

impl Indicator {
    fn build(sample: &TruncatedSample) -> Self {
        let records = sample.records();
        let n = records.len();
        let mut bits = vec![false; n * n];
        for (i, ri) in records.iter().enumerate() {
            for (j, rj) in records.iter().enumerate() {
                bits[i * n + j] = ri.u <= rj.x && rj.x <= ri.v;
            }
        }
        Self { n, bits }
    }

    #[inline]
    fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }
}

/// Conditional log-likelihood of `masses`; the numerator for a record sums
/// the masses of all records tied at the same x.
fn log_likelihood(sample: &TruncatedSample, ind: &Indicator, masses: &[f64]) -> f64 {
    let xs = sample.xs();
    let n = masses.len();
    let mut ll = 0.0;
    for i in 0..n {
        let mut interval = 0.0;
        for j in 0..n {
            if ind.contains(i, j) {
                interval += masses[j];
            }
        }
        let mut atom = 0.0;
        for j in 0..n {
            if xs[j] == xs[i] {
                atom += masses[j];
            }
        }
        ll += atom.ln() - interval.ln();
    }
    ll
}

/// Runs the self-consistency iteration from the uniform start until the
/// sup-norm mass change drops below `tol` or `max_iter` sweeps elapse.
///
/// `converged` is true only when the tolerance was met *and* the truncation
/// graph is strongly connected, i.e. the maximizer the iteration settled on
/// actually exists. A false flag with the partial result is returned
/// otherwise.
pub fn solve_npmle(
    sample: &TruncatedSample,
    tol: f64,
    max_iter: usize,
) -> Result<NpmleWeights, NpmleError> {
    let ind = Indicator::build(sample);
    let n = ind.n;
    let mut masses = vec![1.0 / n as f64; n];
    let mut interval_mass = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut reached_tol = false;

    for _ in 0..max_iter {
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if ind.contains(i, j) {
                    s += masses[j];
                }
            }
            if s < 1e-300 {
                return Err(NpmleError::SingularDenominator(i));
            }
            interval_mass[i] = s;
        }
        trace.push(log_likelihood(sample, &ind, &masses));

        let mut next = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                if ind.contains(j, i) {
                    denom += 1.0 / interval_mass[j];
                }
            }
            next[i] = 1.0 / denom;
            total += next[i];
        }
        let mut delta: f64 = 0.0;
        for i in 0..n {
            next[i] /= total;
            delta = delta.max((next[i] - masses[i]).abs());
        }
        masses = next;
        iterations += 1;
        if delta < tol {
            reached_tol = true;
            break;
        }
    }

    let final_ll = log_likelihood(sample, &ind, &masses);
    trace.push(final_ll);
    let exists = npmle_status(sample).existence == NpmleExistence::UniqueExists;
    Ok(NpmleWeights {
        masses,
        iterations,
        converged: reached_tol && exists,
        log_likelihood: final_ll,
        log_lik_trace: trace,
    })
}

/// Whether the weights are unusable downstream: the solver failed to
/// converge, or a single atom carries more than `threshold` of the mass.
pub fn is_degenerate(weights: &NpmleWeights, threshold: f64) -> bool {
    !weights.converged() || weights.masses().iter().any(|&f| f > threshold)
}

/// Step-function CDF `F_n(t) = sum_{x_i <= t} f_i` evaluated on a grid.
pub fn npmle_cdf(weights: &NpmleWeights, sample: &TruncatedSample, grid: &EvalGrid) -> Vec<f64> {
    let mut atoms: Vec<(f64, f64)> = sample
        .xs()
        .into_iter()
        .zip(weights.masses().iter().copied())
        .collect();
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x"));
    grid.points()
        .iter()
        .map(|&t| {
            atoms
                .iter()
                .take_while(|(x, _)| *x <= t)
                .map(|(_, f)| f)
                .sum()
        })
        .collect()
}
