//! Smoothing-spline log-density estimation.
//!
//! The estimate minimizes `L(eta) + (n lambda / 2) J(eta)` over the finite
//! basis of [`SplineBasis`], where `L` is either the ordinary or the
//! truncation-corrected negative log-likelihood (see [`likelihood`]) and
//! `J(eta) = c' Q c` is the cubic-spline roughness of the smooth part. The
//! inner problem is solved by damped Newton with step halving; the smoothing
//! parameter is chosen by Kullback–Leibler cross-validation
//!
//! ```text
//! V(lambda) = L(eta_hat) + alpha * tr[(H + n lambda Q~)^-1 Hhat] / n
//! ```
//!
//! with `H` the likelihood Hessian at the optimum, `Q~` the penalty matrix
//! embedded over the smooth block, `Hhat` the empirical second moment of the
//! per-observation scores, and `alpha = 1.4` by default. The grid minimizer
//! is polished by one golden-section stage in log lambda.
//!
//! The final density is the logistic transform `exp(eta) / int exp(eta)`,
//! positive and integrating to one on the quadrature grid by construction.

mod basis;
mod likelihood;

pub use basis::{default_anchor_count, SplineBasis, DEFAULT_QUAD_SIZE};
pub use likelihood::{neg_log_lik_corrected, neg_log_lik_ordinary, LikContext, Mode, ETA_OVERFLOW};

use crate::model::{DensityEstimate, EvalGrid, TruncatedSample};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SplineError {
    #[error("need at least 3 distinct observed values, got {0}")]
    TooFewDistinctPoints(usize),

    #[error("record {index}: truncation window is shorter than the quadrature resolution")]
    EmptyTruncationInterval { index: usize },

    #[error("log-density exceeded the overflow guard during evaluation")]
    OverflowGuard,

    #[error("likelihood has no minimizer in the penalty null space")]
    NullSpaceUnbounded,

    #[error("Newton iteration failed to converge")]
    NewtonDiverged,

    #[error("penalized Hessian is singular (smoothing parameter too small for the basis)")]
    SingularSystem,
}

/// Gradient sup-norm tolerance for the inner Newton solve.
pub const NEWTON_GRAD_TOL: f64 = 1e-7;
const NEWTON_MAX_ITER: usize = 50;
const MAX_STEP_HALVINGS: usize = 30;
/// Golden-section tolerance in natural-log lambda.
const GOLDEN_TOL: f64 = 1e-2;
/// Bound on the null-space coordinate beyond which the unpenalized
/// likelihood is treated as unbounded.
const NULL_SPACE_BOUND: f64 = 50.0;

pub const DEFAULT_ALPHA: f64 = 1.4;

/// How the smoothing parameter is determined.
#[derive(Debug, Clone)]
pub enum LambdaChoice {
    /// Cross-validated over a grid (`None` = default 40-point grid,
    /// log-spaced so that `n * lambda` spans `[1e-7, 1e2]`), then refined by
    /// golden section around the grid minimizer.
    Select { grid: Option<Vec<f64>> },
    /// Fixed value; no cross-validation runs.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub lambda: LambdaChoice,
    /// Inflation factor on the cross-validation degrees-of-freedom term.
    pub alpha: f64,
    /// Basis anchor count override.
    pub q: Option<usize>,
    pub quad_size: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::Select { grid: None },
            alpha: DEFAULT_ALPHA,
            q: None,
            quad_size: DEFAULT_QUAD_SIZE,
        }
    }
}

/// Default smoothing-parameter grid for a sample of size `n`.
pub fn default_lambda_grid(n: usize) -> Vec<f64> {
    let count = 40;
    (0..count)
        .map(|i| 10f64.powf(-7.0 + 9.0 * i as f64 / (count - 1) as f64) / n as f64)
        .collect()
}

/// A converged inner solve at one smoothing parameter.
#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub lambda: f64,
    pub theta: DVector<f64>,
    /// Unpenalized likelihood value at the optimum.
    pub neg_log_lik: f64,
    pub penalized_objective: f64,
    pub newton_iters: usize,
    /// Penalized objective after each accepted step (non-increasing).
    pub objective_trace: Vec<f64>,
    hess: DMatrix<f64>,
    emp_second_moment: DMatrix<f64>,
}

struct Penalty<'a> {
    nlam: f64,
    gram: &'a DMatrix<f64>,
}

impl Penalty<'_> {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let c = theta.rows(1, theta.len() - 1);
        0.5 * self.nlam * (c.transpose() * self.gram * c)[(0, 0)]
    }

    fn add_grad(&self, theta: &DVector<f64>, grad: &mut DVector<f64>) {
        let q = theta.len() - 1;
        let c = theta.rows(1, q);
        let qc = self.gram * c;
        for j in 0..q {
            grad[j + 1] += self.nlam * qc[j];
        }
    }

    fn add_hess(&self, hess: &mut DMatrix<f64>) {
        let q = hess.nrows() - 1;
        for i in 0..q {
            for j in 0..q {
                hess[(i + 1, j + 1)] += self.nlam * self.gram[(i, j)];
            }
        }
    }
}

/// Eigenvalue floor for the pseudo-inverse fallback, relative to the largest
/// eigenvalue.
const EIGEN_FLOOR: f64 = 1e-12;

/// Solves the symmetric positive semidefinite system `m x = rhs`. Cholesky
/// when the matrix is numerically definite; otherwise the directions below
/// the eigenvalue floor are dropped (the reproducing-kernel basis is nearly
/// dependent at small smoothing parameters, and the objective is flat along
/// exactly those directions).
fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, SplineError> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.solve(rhs));
    }
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    if !(max.is_finite() && max > 0.0) {
        return Err(SplineError::SingularSystem);
    }
    let floor = max * EIGEN_FLOOR;
    let projected = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        projected.len(),
        projected
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&b, &l)| if l > floor { b / l } else { 0.0 }),
    );
    Ok(&eig.eigenvectors * scaled)
}

/// `tr(m^-1 h)` with the same definiteness fallback as [`solve_spd`].
fn spd_inverse_trace(m: DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64, SplineError> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.solve(h).trace());
    }
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    if !(max.is_finite() && max > 0.0) {
        return Err(SplineError::SingularSystem);
    }
    let floor = max * EIGEN_FLOOR;
    let mut trace = 0.0;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l > floor {
            let v = eig.eigenvectors.column(j);
            trace += (v.transpose() * h * v)[(0, 0)] / l;
        }
    }
    Ok(trace)
}

/// Damped Newton with step halving on `L(theta) + (n lambda / 2) c'Qc`.
pub fn newton_solve(
    ctx: &LikContext,
    basis: &SplineBasis,
    lambda: f64,
    theta0: DVector<f64>,
) -> Result<LambdaFit, SplineError> {
    let pen = Penalty {
        nlam: ctx.sample_size() as f64 * lambda,
        gram: basis.gram(),
    };
    let mut theta = theta0;
    let mut ev = ctx.eval(basis, &theta, false)?;
    let mut obj = ev.value + pen.value(&theta);
    let mut trace = vec![obj];

    for iter in 0..NEWTON_MAX_ITER {
        let mut grad = ev.grad.clone();
        pen.add_grad(&theta, &mut grad);
        if grad.amax() < NEWTON_GRAD_TOL {
            let fin = ctx.eval(basis, &theta, true)?;
            return Ok(LambdaFit {
                lambda,
                theta,
                neg_log_lik: fin.value,
                penalized_objective: obj,
                newton_iters: iter,
                objective_trace: trace,
                hess: fin.hess,
                emp_second_moment: fin.emp_second_moment.expect("requested"),
            });
        }
        let mut hess = ev.hess.clone();
        pen.add_hess(&mut hess);
        let delta = solve_spd(hess, &(-&grad))?;

        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand = &theta + &delta * step;
            match ctx.value(basis, &cand) {
                Ok(v) => {
                    let cand_obj = v + pen.value(&cand);
                    if cand_obj <= obj {
                        accepted = Some((cand, cand_obj));
                        break;
                    }
                }
                // Divergent trial step: treat the objective as +inf and halve.
                Err(SplineError::OverflowGuard) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((next, next_obj)) = accepted else {
            return Err(SplineError::NewtonDiverged);
        };
        theta = next;
        obj = next_obj;
        trace.push(obj);
        ev = ctx.eval(basis, &theta, false)?;
    }
    Err(SplineError::NewtonDiverged)
}

/// Kullback–Leibler cross-validation score of a converged fit.
///
/// `V = L(theta_hat) + alpha tr[(H + n lambda Q~)^-1 Hhat] / n`; smaller is
/// better. With `alpha = 0` this is the in-sample likelihood value.
pub fn cv_score(
    fit: &LambdaFit,
    basis: &SplineBasis,
    sample_size: usize,
    alpha: f64,
) -> Result<f64, SplineError> {
    Ok(fit.neg_log_lik + alpha * trace_correction(fit, basis, sample_size)?)
}

/// The trace-based degrees-of-freedom term of [`cv_score`], already divided
/// by the sample size.
pub fn trace_correction(
    fit: &LambdaFit,
    basis: &SplineBasis,
    sample_size: usize,
) -> Result<f64, SplineError> {
    let nf = sample_size as f64;
    let pen = Penalty {
        nlam: nf * fit.lambda,
        gram: basis.gram(),
    };
    let mut m = fit.hess.clone();
    pen.add_hess(&mut m);
    Ok(spd_inverse_trace(m, &fit.emp_second_moment)? / nf)
}

/// Certifies that the unpenalized likelihood has a bounded minimizer on the
/// one-dimensional null space (zero-mean linear log-densities) and returns
/// that minimizer's coordinate, used as the Newton warm start.
fn null_space_minimizer(ctx: &LikContext, basis: &SplineBasis) -> Result<f64, SplineError> {
    let lo_slope = ctx.null_slope(basis, -NULL_SPACE_BOUND)?;
    let hi_slope = ctx.null_slope(basis, NULL_SPACE_BOUND)?;
    if !(lo_slope < 0.0 && hi_slope > 0.0) {
        return Err(SplineError::NullSpaceUnbounded);
    }
    let (mut lo, mut hi) = (-NULL_SPACE_BOUND, NULL_SPACE_BOUND);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ctx.null_slope(basis, mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fitted log-density with the selected smoothing parameter.
#[derive(Debug, Clone)]
pub struct SplineFit {
    basis: SplineBasis,
    coefficients: DVector<f64>,
    lambda: f64,
    mode: Mode,
    cv_trace: Vec<(f64, f64)>,
    newton_iters: usize,
    converged: bool,
}

impl SplineFit {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `(lambda, cv score)` pairs in increasing lambda, including the
    /// golden-section probes; empty when lambda was fixed.
    pub fn cv_trace(&self) -> &[(f64, f64)] {
        &self.cv_trace
    }

    pub fn newton_iters(&self) -> usize {
        self.newton_iters
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Log-density values at arbitrary points.
    pub fn eta_at(&self, points: &[f64]) -> Vec<f64> {
        self.basis.eta_at(&self.coefficients, points)
    }

    /// `int eta dx` over the domain on the quadrature grid; zero up to
    /// rounding by the basis construction.
    pub fn side_condition_residual(&self) -> f64 {
        let eta = self.basis.eta_quad(&self.coefficients);
        self.basis
            .quad_weights()
            .iter()
            .zip(eta.iter())
            .map(|(&w, &e)| w * e)
            .sum()
    }

    /// The density `exp(eta) / int exp(eta)` on an evaluation grid.
    pub fn density(&self, grid: &EvalGrid) -> DensityEstimate {
        let z = self
            .basis
            .normalizer(&self.basis.eta_quad(&self.coefficients));
        let values: Vec<f64> = self
            .eta_at(grid.points())
            .into_iter()
            .map(|e| e.exp() / z)
            .collect();
        DensityEstimate::new(grid.clone(), values).expect("logistic transform is positive")
    }

    /// Density mass over the quadrature grid; exactly one up to rounding.
    pub fn quadrature_mass(&self) -> f64 {
        let eta = self.basis.eta_quad(&self.coefficients);
        let z = self.basis.normalizer(&eta);
        self.basis
            .quad_weights()
            .iter()
            .zip(eta.iter())
            .map(|(&w, &e)| w * e.exp() / z)
            .sum()
    }
}

/// Fits the model at each smoothing parameter in `lambdas`, in the given
/// order, warm-starting each solve from the previous solution. Entries fail
/// individually; the basis is shared.
pub fn fit_at_lambdas(
    sample: &TruncatedSample,
    mode: Mode,
    lambdas: &[f64],
    q: Option<usize>,
    quad_size: usize,
) -> Result<Vec<Result<LambdaFit, SplineError>>, SplineError> {
    let basis = SplineBasis::build(sample, q, quad_size)?;
    let ctx = LikContext::new(sample, &basis, mode)?;
    let mut warm = DVector::zeros(basis.dim());
    warm[0] = null_space_minimizer(&ctx, &basis)?;
    Ok(lambdas
        .iter()
        .map(|&lam| {
            let res = newton_solve(&ctx, &basis, lam, warm.clone());
            if let Ok(fit) = &res {
                warm = fit.theta.clone();
            }
            res
        })
        .collect())
}

/// Fits the smoothing-spline density estimator.
///
/// With [`LambdaChoice::Select`], every grid value is fitted (largest lambda
/// first, warm-starting downward), scored by [`cv_score`], and the grid
/// minimizer is refined by golden section in log lambda. Individual grid
/// points may fail (too small a lambda for the basis); the fit fails only if
/// all of them do.
pub fn fit_spline(
    sample: &TruncatedSample,
    mode: Mode,
    opts: &FitOptions,
) -> Result<SplineFit, SplineError> {
    let basis = SplineBasis::build(sample, opts.q, opts.quad_size)?;
    let ctx = LikContext::new(sample, &basis, mode)?;
    let mut start = DVector::zeros(basis.dim());
    start[0] = null_space_minimizer(&ctx, &basis)?;
    let n = ctx.sample_size();

    match &opts.lambda {
        LambdaChoice::Fixed(lambda) => {
            let fit = newton_solve(&ctx, &basis, *lambda, start)?;
            Ok(SplineFit {
                basis,
                coefficients: fit.theta,
                lambda: *lambda,
                mode,
                cv_trace: Vec::new(),
                newton_iters: fit.newton_iters,
                converged: true,
            })
        }
        LambdaChoice::Select { grid } => {
            let mut lambdas = grid.clone().unwrap_or_else(|| default_lambda_grid(n));
            lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());

            let mut trace: Vec<(f64, f64)> = Vec::new();
            let mut best: Option<(f64, LambdaFit)> = None;
            let mut warm = start;
            let mut last_err = SplineError::NewtonDiverged;
            for &lam in &lambdas {
                match newton_solve(&ctx, &basis, lam, warm.clone()) {
                    Ok(fit) => {
                        warm = fit.theta.clone();
                        match cv_score(&fit, &basis, n, opts.alpha) {
                            Ok(score) => {
                                trace.push((lam, score));
                                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                                    best = Some((score, fit));
                                }
                            }
                            Err(e) => last_err = e,
                        }
                    }
                    Err(e) => last_err = e,
                }
            }
            let Some((mut best_score, mut best_fit)) = best else {
                return Err(last_err);
            };

            // Golden-section polish between the grid neighbours of the
            // minimizer, in log lambda.
            let scored: Vec<f64> = trace.iter().map(|&(l, _)| l).collect();
            let pos = scored
                .iter()
                .position(|&l| l == best_fit.lambda)
                .expect("best lambda is in the trace");
            // trace is in descending lambda order here
            let upper = if pos > 0 { scored[pos - 1] } else { scored[pos] };
            let lower = if pos + 1 < scored.len() {
                scored[pos + 1]
            } else {
                scored[pos]
            };
            if lower < upper {
                let (mut a, mut b) = (lower.ln(), upper.ln());
                let phi = (5f64.sqrt() - 1.0) / 2.0;
                let mut evaluate = |ln_lam: f64, warm: &DVector<f64>| -> (f64, Option<LambdaFit>) {
                    let lam = ln_lam.exp();
                    match newton_solve(&ctx, &basis, lam, warm.clone()) {
                        Ok(fit) => match cv_score(&fit, &basis, n, opts.alpha) {
                            Ok(score) => {
                                trace.push((lam, score));
                                (score, Some(fit))
                            }
                            Err(_) => (f64::INFINITY, None),
                        },
                        Err(_) => (f64::INFINITY, None),
                    }
                };
                let warm_ref = best_fit.theta.clone();
                let mut c = b - phi * (b - a);
                let mut d = a + phi * (b - a);
                let (mut fc, fit_c) = evaluate(c, &warm_ref);
                let (mut fd, fit_d) = evaluate(d, &warm_ref);
                let consider = |score: f64, fit: Option<LambdaFit>, best_score: &mut f64, best_fit: &mut LambdaFit| {
                    if let Some(f) = fit {
                        if score < *best_score {
                            *best_score = score;
                            *best_fit = f;
                        }
                    }
                };
                consider(fc, fit_c, &mut best_score, &mut best_fit);
                consider(fd, fit_d, &mut best_score, &mut best_fit);
                while b - a > GOLDEN_TOL {
                    if fc < fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - phi * (b - a);
                        let (score, fit) = evaluate(c, &best_fit.theta.clone());
                        fc = score;
                        consider(score, fit, &mut best_score, &mut best_fit);
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + phi * (b - a);
                        let (score, fit) = evaluate(d, &best_fit.theta.clone());
                        fd = score;
                        consider(score, fit, &mut best_score, &mut best_fit);
                    }
                }
            }

            trace.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Ok(SplineFit {
                basis,
                coefficients: best_fit.theta,
                lambda: best_fit.lambda,
                mode,
                cv_trace: trace,
                newton_iters: best_fit.newton_iters,
                converged: true,
            })
        }
    }
}
