//! Pointwise percentile confidence bands by the simple bootstrap: resample
//! `(u, v, x)` triplets jointly with replacement, re-run the estimator on
//! every replicate, and take empirical quantiles per grid point.
//!
//! Smoothing parameters are re-selected inside every replicate by default,
//! so selection variability enters the bands; `freeze_smoothing` pins them
//! to the original fit for speed. Records are put in a canonical order
//! before resampling, making the bands invariant under permutation of the
//! input.

use crate::estimator::{EstimateError, Estimated, MethodSpec};
use crate::model::{DensityEstimate, EvalGrid, TruncatedSample};
use crate::parallel::{self, derive_seed};
use crate::simulate::quantile_type7;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum BootstrapError {
    #[error("estimator failed on the original sample: {0}")]
    PointEstimate(#[source] EstimateError),

    #[error("{failed} of {total} bootstrap replicates failed; bands unreliable")]
    TooManyFailures { failed: usize, total: usize },

    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
}

pub const DEFAULT_REPLICATES: usize = 250;
pub const DEFAULT_LEVEL: f64 = 0.95;
const STREAM_BOOTSTRAP: u64 = 2;

#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    /// Number of bootstrap replicates (B).
    pub replicates: usize,
    /// Two-sided confidence level of the pointwise bands.
    pub level: f64,
    pub seed: u64,
    /// Worker threads (0 = all cores, 1 = sequential).
    pub workers: usize,
    /// Reuse the original fit's lambda or bandwidth in every replicate
    /// instead of re-selecting it.
    pub freeze_smoothing: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            level: DEFAULT_LEVEL,
            seed: 0,
            workers: 0,
            freeze_smoothing: false,
        }
    }
}

/// Pointwise percentile bands around the original-data estimate.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapBands {
    pub grid: EvalGrid,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub point: DensityEstimate,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Bands for one of the built-in methods.
pub fn bootstrap_bands(
    sample: &TruncatedSample,
    method: &MethodSpec,
    grid: &EvalGrid,
    config: &BootstrapConfig,
) -> Result<BootstrapBands, BootstrapError> {
    bootstrap_bands_with(sample, grid, config, |method_sample, method_grid, frozen| {
        let spec = match frozen {
            Some(value) => method.with_fixed_smoothing(value),
            None => method.clone(),
        };
        spec.estimate(method_sample, method_grid)
    })
}

/// Generic driver: `estimate(sample, grid, frozen_smoothing)` runs the
/// estimator, where `frozen_smoothing` is `Some(original fit's parameter)`
/// once the point estimate is known and freezing was requested.
pub fn bootstrap_bands_with<F>(
    sample: &TruncatedSample,
    grid: &EvalGrid,
    config: &BootstrapConfig,
    estimate: F,
) -> Result<BootstrapBands, BootstrapError>
where
    F: Fn(&TruncatedSample, &EvalGrid, Option<f64>) -> Result<Estimated, EstimateError> + Sync,
{
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(BootstrapError::InvalidLevel(config.level));
    }
    let canonical = sample.sorted();
    let point = estimate(&canonical, grid, None).map_err(BootstrapError::PointEstimate)?;
    let frozen = config.freeze_smoothing.then_some(point.smoothing);

    let records = canonical.records();
    let n = records.len();
    let domain = canonical.domain();
    let total = config.replicates;

    let replicates: Vec<Option<Vec<f64>>> = parallel::with_pool(config.workers, || {
        parallel::map_indexed(total, |b| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_BOOTSTRAP, b as u64));
            let raw: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    let r = records[rng.random_range(0..n)];
                    (r.u, r.v, r.x)
                })
                .collect();
            // Resampled x values stay inside the original domain.
            let resample = TruncatedSample::new(&raw, Some(domain)).expect("records stay valid");
            match estimate(&resample, grid, frozen) {
                Ok(est) if !est.degenerate => Some(est.density.values().to_vec()),
                _ => None,
            }
        })
    });

    let used: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let failed = total - used.len();
    if failed * 2 > total {
        return Err(BootstrapError::TooManyFailures { failed, total });
    }

    let tail = (1.0 - config.level) / 2.0;
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; used.len()];
    for g in 0..grid.len() {
        for (k, rep) in used.iter().enumerate() {
            column[k] = rep[g];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(quantile_type7(&column, tail));
        upper.push(quantile_type7(&column, 1.0 - tail));
    }

    Ok(BootstrapBands {
        grid: grid.clone(),
        lower,
        upper,
        point: point.density,
        replicates_used: used.len(),
        replicates_failed: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimateDetail;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_sample(seed: u64, n: usize) -> TruncatedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = Vec::with_capacity(n);
        while raw.len() < n {
            let x: f64 = rng.random_range(0.0..1.0);
            let u = x - rng.random_range(0.1..0.6);
            let v = x + rng.random_range(0.1..0.6);
            if u <= x && x <= v {
                raw.push((u, v, x));
            }
        }
        TruncatedSample::new(&raw, Some((0.0, 1.0))).unwrap()
    }

    fn constant_estimator(
        sample: &TruncatedSample,
        grid: &EvalGrid,
        _frozen: Option<f64>,
    ) -> Result<Estimated, EstimateError> {
        let _ = sample;
        Ok(Estimated {
            density: DensityEstimate::new(grid.clone(), vec![1.0; grid.len()]).unwrap(),
            smoothing: 1.0,
            degenerate: false,
            detail: EstimateDetail::Kde {
                npmle_iterations: 0,
                npmle_log_likelihood: 0.0,
            },
        })
    }

    #[test]
    fn constant_estimator_gives_degenerate_bands() {
        let s = small_sample(3, 40);
        let grid = EvalGrid::new(0.0, 1.0, 21).unwrap();
        let cfg = BootstrapConfig {
            replicates: 25,
            workers: 1,
            ..Default::default()
        };
        let bands = bootstrap_bands_with(&s, &grid, &cfg, constant_estimator).unwrap();
        assert!(bands.lower.iter().all(|&v| v == 1.0));
        assert!(bands.upper.iter().all(|&v| v == 1.0));
        assert_eq!(bands.replicates_used, 25);
    }

    #[test]
    fn single_replicate_collapses_bands() {
        let s = small_sample(5, 50);
        let grid = EvalGrid::new(0.0, 1.0, 31).unwrap();
        let cfg = BootstrapConfig {
            replicates: 1,
            workers: 1,
            seed: 9,
            ..Default::default()
        };
        let bands = bootstrap_bands(&s, &MethodSpec::kde_dpi1(), &grid, &cfg).unwrap();
        for (l, u) in bands.lower.iter().zip(&bands.upper) {
            assert_eq!(l, u);
        }
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let s = small_sample(7, 60);
        let grid = EvalGrid::new(0.0, 1.0, 41).unwrap();
        let cfg = BootstrapConfig {
            replicates: 16,
            seed: 42,
            workers: 0,
            ..Default::default()
        };
        let method = MethodSpec::kde_dpi1();
        let a = bootstrap_bands(&s, &method, &grid, &cfg).unwrap();
        let b = bootstrap_bands(&s, &method, &grid, &cfg).unwrap();
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.upper, b.upper);

        // permute the records
        let mut raw: Vec<(f64, f64, f64)> = s.records().iter().map(|r| (r.u, r.v, r.x)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        raw.shuffle(&mut rng);
        let permuted = TruncatedSample::new(&raw, Some(s.domain())).unwrap();
        let c = bootstrap_bands(&permuted, &method, &grid, &cfg).unwrap();
        assert_eq!(a.lower, c.lower);
        assert_eq!(a.upper, c.upper);

        // sequential equals parallel
        let seq_cfg = BootstrapConfig {
            workers: 1,
            ..cfg
        };
        let d = bootstrap_bands(&s, &method, &grid, &seq_cfg).unwrap();
        assert_eq!(a.lower, d.lower);
        assert_eq!(a.upper, d.upper);
    }

    #[test]
    fn wider_level_nests_narrower() {
        let s = small_sample(11, 60);
        let grid = EvalGrid::new(0.0, 1.0, 31).unwrap();
        let narrow = BootstrapConfig {
            replicates: 32,
            seed: 4,
            level: 0.95,
            workers: 0,
            ..Default::default()
        };
        let wide = BootstrapConfig {
            level: 0.99,
            ..narrow
        };
        let method = MethodSpec::kde_dpi1();
        let b95 = bootstrap_bands(&s, &method, &grid, &narrow).unwrap();
        let b99 = bootstrap_bands(&s, &method, &grid, &wide).unwrap();
        for g in 0..grid.len() {
            assert!(b99.lower[g] <= b95.lower[g] + 1e-15);
            assert!(b99.upper[g] >= b95.upper[g] - 1e-15);
            assert!(b95.lower[g] <= b95.upper[g]);
        }
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let s = small_sample(13, 30);
        let grid = EvalGrid::new(0.0, 1.0, 11).unwrap();
        let cfg = BootstrapConfig {
            replicates: 10,
            workers: 1,
            ..Default::default()
        };
        let mut calls = std::sync::atomic::AtomicUsize::new(0);
        let failing = |sample: &TruncatedSample, grid: &EvalGrid, frozen: Option<f64>| {
            let k = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if k == 0 {
                constant_estimator(sample, grid, frozen)
            } else {
                Err(EstimateError::Kde(crate::kde::KdeError::DegenerateWeights))
            }
        };
        let err = bootstrap_bands_with(&s, &grid, &cfg, failing).unwrap_err();
        assert!(matches!(err, BootstrapError::TooManyFailures { failed: 10, total: 10 }));
        let _ = calls.get_mut();
    }
}
