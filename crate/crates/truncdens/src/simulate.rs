//! Monte Carlo study harness: scenario samplers, closed-form truths,
//! integrated squared error, and the trial runner.
//!
//! Scenario laws (domain fixed to `[0, 1]`, `V = U + tau`):
//!
//! * S1: `X ~ Unif(0,1)`, `U ~ Unif(-1/3, 1)` — constant selection
//!   probability, no sampling bias;
//! * S2: `X ~ Unif(0,1)`, `sqrt((3/4)(U + 1/3)) ~ Unif(0,1)`;
//! * S3: `X ~ Beta(3/2, 5)`, same `U` as S2;
//! * S4: `X ~ Norm(1/2, 1/10)`, `U ~ Beta(20, 20)`.
//!
//! `tau` is either the constant `1/3` or `Unif(1/3 - 1/20, 1/3 + 1/20)`.
//! Samples are drawn by rejection: propose `X` and `(U, tau)` independently,
//! accept iff `U <= X <= V`.

use crate::estimator::MethodSpec;
use crate::model::{trapezoid_integral, DensityEstimate, EvalGrid, TruncatedSample};
use crate::parallel::{self, derive_seed};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDistr, Distribution, Normal as NormalDistr, Uniform};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("rejection sampler stalled: {0} consecutive proposals rejected")]
    AcceptanceStall(usize),

    #[error("estimate and truth are tabulated on different grids")]
    GridMismatch,

    #[error("unknown scenario `{0}` (expected S1..S4)")]
    UnknownScenario(String),

    #[error("unknown tau mode `{0}` (expected constant|random)")]
    UnknownTauMode(String),
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 1_000_000;
const STREAM_TRIAL: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Self::S1),
            "S2" => Ok(Self::S2),
            "S3" => Ok(Self::S3),
            "S4" => Ok(Self::S4),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TauMode {
    Constant,
    Random,
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Random => "random",
        })
    }
}

impl FromStr for TauMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "random" => Ok(Self::Random),
            other => Err(SimError::UnknownTauMode(other.to_string())),
        }
    }
}

/// One simulation setting: laws, sample size, and base seed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub tau_mode: TauMode,
    pub n: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn label(&self) -> String {
        format!("{}-{}-n{}", self.id, self.tau_mode, self.n)
    }
}

struct ScenarioSampler {
    id: ScenarioId,
    tau_mode: TauMode,
    x_beta: Option<BetaDistr<f64>>,
    x_normal: Option<NormalDistr<f64>>,
    u_beta: Option<BetaDistr<f64>>,
    u_uniform: Option<Uniform<f64>>,
    tau_uniform: Option<Uniform<f64>>,
}

impl ScenarioSampler {
    fn new(sc: &Scenario) -> Self {
        Self {
            id: sc.id,
            tau_mode: sc.tau_mode,
            x_beta: matches!(sc.id, ScenarioId::S3)
                .then(|| BetaDistr::new(1.5, 5.0).expect("valid Beta")),
            x_normal: matches!(sc.id, ScenarioId::S4)
                .then(|| NormalDistr::new(0.5, 0.1).expect("valid Normal")),
            u_beta: matches!(sc.id, ScenarioId::S4)
                .then(|| BetaDistr::new(20.0, 20.0).expect("valid Beta")),
            u_uniform: matches!(sc.id, ScenarioId::S1)
                .then(|| Uniform::new(-1.0 / 3.0, 1.0).expect("valid Uniform")),
            tau_uniform: matches!(sc.tau_mode, TauMode::Random).then(|| {
                Uniform::new(1.0 / 3.0 - 1.0 / 20.0, 1.0 / 3.0 + 1.0 / 20.0)
                    .expect("valid Uniform")
            }),
        }
    }

    /// One independent proposal `(u, v, x)`; acceptance means `u <= x <= v`.
    fn propose(&self, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
        let x = match self.id {
            ScenarioId::S1 | ScenarioId::S2 => rng.random_range(0.0..1.0),
            ScenarioId::S3 => self.x_beta.as_ref().unwrap().sample(rng),
            // The estimators work on [0, 1] and the truth is renormalized
            // there, so proposals outside the domain (mass < 1e-6) are
            // re-drawn: this samples the conditional law given X in [0, 1].
            ScenarioId::S4 => loop {
                let x = self.x_normal.as_ref().unwrap().sample(rng);
                if (0.0..=1.0).contains(&x) {
                    break x;
                }
            },
        };
        let u = match self.id {
            ScenarioId::S1 => self.u_uniform.as_ref().unwrap().sample(rng),
            ScenarioId::S2 | ScenarioId::S3 => {
                let w: f64 = rng.random_range(0.0..1.0);
                (4.0 / 3.0) * w * w - 1.0 / 3.0
            }
            ScenarioId::S4 => self.u_beta.as_ref().unwrap().sample(rng),
        };
        let tau = match self.tau_mode {
            TauMode::Constant => 1.0 / 3.0,
            TauMode::Random => self.tau_uniform.as_ref().unwrap().sample(rng),
        };
        (u, u + tau, x)
    }
}

/// Draws a doubly truncated sample of size `scenario.n` by rejection;
/// deterministic given the scenario seed.
pub fn sample_scenario(scenario: &Scenario) -> Result<TruncatedSample, SimError> {
    let sampler = ScenarioSampler::new(scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut raw = Vec::with_capacity(scenario.n);
    let mut consecutive_rejections = 0usize;
    while raw.len() < scenario.n {
        let (u, v, x) = sampler.propose(&mut rng);
        if u <= x && x <= v {
            raw.push((u, v, x));
            consecutive_rejections = 0;
        } else {
            consecutive_rejections += 1;
            if consecutive_rejections >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(SimError::AcceptanceStall(consecutive_rejections));
            }
        }
    }
    Ok(TruncatedSample::new(&raw, Some((0.0, 1.0))).expect("accepted records are valid"))
}

/// Outcome of running raw proposals, for diagnostics on the sampling law.
pub struct ProposalStats {
    /// Proposed x paired with whether `u <= x <= v` held.
    pub samples: Vec<(f64, bool)>,
}

impl ProposalStats {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.iter().filter(|(_, a)| *a).count() as f64 / self.samples.len() as f64
    }

    pub fn accepted_x(&self) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|(_, a)| *a)
            .map(|(x, _)| *x)
            .collect()
    }

    /// Conditional acceptance rates over equal-width x-bins spanning `[0, 1]`.
    pub fn bin_acceptance_rates(&self, bins: usize) -> Vec<f64> {
        let mut accepted = vec![0usize; bins];
        let mut proposed = vec![0usize; bins];
        for &(x, a) in &self.samples {
            if (0.0..=1.0).contains(&x) {
                let b = ((x * bins as f64) as usize).min(bins - 1);
                proposed[b] += 1;
                if a {
                    accepted[b] += 1;
                }
            }
        }
        accepted
            .iter()
            .zip(&proposed)
            .map(|(&a, &p)| a as f64 / p.max(1) as f64)
            .collect()
    }
}

/// Runs `proposals` independent proposals and records their acceptance.
pub fn run_proposals(scenario: &Scenario, proposals: usize) -> ProposalStats {
    let sampler = ScenarioSampler::new(scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let samples = (0..proposals)
        .map(|_| {
            let (u, v, x) = sampler.propose(&mut rng);
            (x, u <= x && x <= v)
        })
        .collect();
    ProposalStats { samples }
}

/// Closed-form target density on the grid. The S4 normal is renormalized to
/// `[0, 1]` (mass outside is below 1e-6).
pub fn true_density(id: ScenarioId, grid: &EvalGrid) -> DensityEstimate {
    let values: Vec<f64> = match id {
        ScenarioId::S1 | ScenarioId::S2 => vec![1.0; grid.len()],
        ScenarioId::S3 => {
            // Beta(3/2, 5): x^(1/2) (1-x)^4 / B(3/2, 5), B = 768/10395
            let inv_b = 10395.0 / 768.0;
            grid.points()
                .iter()
                .map(|&x| {
                    if (0.0..=1.0).contains(&x) {
                        inv_b * x.sqrt() * (1.0 - x).powi(4)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        ScenarioId::S4 => {
            let normal = Normal::new(0.5, 0.1).expect("valid normal");
            let mass = normal.cdf(1.0) - normal.cdf(0.0);
            grid.points()
                .iter()
                .map(|&x| {
                    let z = (x - 0.5) / 0.1;
                    (-0.5 * z * z).exp() / (0.1 * (2.0 * std::f64::consts::PI).sqrt()) / mass
                })
                .collect()
        }
    };
    DensityEstimate::new(grid.clone(), values).expect("densities are non-negative")
}

/// Integrated squared error between an estimate and the truth on a shared
/// grid (trapezoid rule).
pub fn ise(estimate: &DensityEstimate, truth: &DensityEstimate) -> Result<f64, SimError> {
    if estimate.grid() != truth.grid() {
        return Err(SimError::GridMismatch);
    }
    let sq: Vec<f64> = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(trapezoid_integral(&sq, estimate.grid()).expect("same grid"))
}

/// One estimator run within one trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub scenario: String,
    pub trial: usize,
    pub method: String,
    /// Integrated squared error when the estimator returned values.
    pub ise: Option<f64>,
    /// Error name when it failed.
    pub error: Option<String>,
}

/// Aggregates for one (scenario, method) cell.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub scenario: String,
    pub method: String,
    /// Mean ISE over trials where the estimator returned values.
    pub mise: Option<f64>,
    /// Sample standard deviation of those ISEs.
    pub sdise: Option<f64>,
    /// Median ISE (robust aggregation over the same values).
    pub mdise: Option<f64>,
    /// Interquartile range of the ISEs.
    pub iqrise: Option<f64>,
    pub trials: usize,
    /// Trials where the estimator errored; excluded from the statistics.
    pub failures: usize,
}

/// Study outcome: per-cell summaries plus the full per-trial log they were
/// computed from.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub rows: Vec<MethodSummary>,
    pub per_trial: Vec<TrialRecord>,
}

impl StudyReport {
    pub fn row(&self, scenario: &str, method: &str) -> Option<&MethodSummary> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method)
    }
}

/// Mean, sample SD, median, and IQR of a set of ISE values.
pub fn summarize_ises(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        Some(
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt(),
        )
    } else {
        Some(0.0)
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_type7(&sorted, 0.5);
    let iqr = quantile_type7(&sorted, 0.75) - quantile_type7(&sorted, 0.25);
    (Some(mean), sd, Some(median), Some(iqr))
}

/// Type-7 (linear interpolation) quantile of an already sorted slice.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs `trials` Monte Carlo trials of every scenario, scoring every method
/// by ISE against the closed-form truth on the default 101-point grid.
///
/// Per-trial seeds derive from the scenario seed and the trial index, and
/// aggregation is keyed by trial index, so the outcome is identical for any
/// `workers` count (0 = all cores).
pub fn run_study(
    scenarios: &[Scenario],
    methods: &[MethodSpec],
    trials: usize,
    workers: usize,
) -> Result<StudyReport, SimError> {
    let grid = EvalGrid::new(0.0, 1.0, crate::model::DEFAULT_GRID_COUNT).expect("valid grid");

    let all: Vec<Result<Vec<TrialRecord>, SimError>> = parallel::with_pool(workers, || {
        let tasks = scenarios.len() * trials;
        parallel::map_indexed(tasks, |task| {
            let scenario = &scenarios[task / trials];
            let trial = task % trials;
            let truth = true_density(scenario.id, &grid);
            let trial_scenario = Scenario {
                seed: derive_seed(scenario.seed, STREAM_TRIAL, trial as u64),
                ..*scenario
            };
            let sample = sample_scenario(&trial_scenario)?;
            Ok(methods
                .iter()
                .map(|method| match method.estimate(&sample, &grid) {
                    Ok(est) => TrialRecord {
                        scenario: scenario.label(),
                        trial,
                        method: method.name().to_string(),
                        ise: Some(ise(&est.density, &truth).expect("shared grid")),
                        error: None,
                    },
                    Err(e) => TrialRecord {
                        scenario: scenario.label(),
                        trial,
                        method: method.name().to_string(),
                        ise: None,
                        error: Some(e.code().to_string()),
                    },
                })
                .collect())
        })
    });

    let mut per_trial = Vec::with_capacity(scenarios.len() * trials * methods.len());
    for group in all {
        per_trial.extend(group?);
    }

    let mut rows = Vec::new();
    for scenario in scenarios {
        let label = scenario.label();
        for method in methods {
            let name = method.name();
            let ises: Vec<f64> = per_trial
                .iter()
                .filter(|r| r.scenario == label && r.method == name)
                .filter_map(|r| r.ise)
                .collect();
            let failures = trials - ises.len();
            let (mise, sdise, mdise, iqrise) = summarize_ises(&ises);
            rows.push(MethodSummary {
                scenario: label.clone(),
                method: name.to_string(),
                mise,
                sdise,
                mdise,
                iqrise,
                trials,
                failures,
            });
        }
    }
    Ok(StudyReport { rows, per_trial })
}
