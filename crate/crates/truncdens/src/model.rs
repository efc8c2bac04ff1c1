//! Core data types: validated samples, evaluation grids, density estimates,
//! and the shared quadrature primitives.

use serde::Serialize;
use std::io::Read;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("sample contains no records")]
    EmptySample,

    #[error("record {index}: x = {x} lies outside its truncation interval [{u}, {v}]")]
    ObservabilityViolation { index: usize, u: f64, v: f64, x: f64 },

    #[error("record {index}: non-finite value")]
    NonFiniteValue { index: usize },

    #[error("invalid domain [{lo}, {hi}]: must satisfy lo < hi and contain every x")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("grid must have at least 2 points, got {0}")]
    InvalidGrid(usize),

    #[error("length mismatch: {expected} grid points vs {got} values")]
    LengthMismatch { expected: usize, got: usize },

    #[error("density values must be non-negative and finite (offending index {0})")]
    NegativeDensity(usize),

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// One observation triplet: `x` was recorded because `u <= x <= v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Record {
    pub u: f64,
    pub v: f64,
    pub x: f64,
}

impl Record {
    /// Length of the observation window, `v - u`.
    pub fn tau(&self) -> f64 {
        self.v - self.u
    }
}

/// A validated doubly truncated sample together with the working domain,
/// a closed interval believed to contain the support of the target density.
///
/// Invariants enforced at construction: the record list is non-empty, every
/// record satisfies `u <= x <= v` with finite values, and every `x` lies in
/// the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSample {
    records: Vec<Record>,
    domain: (f64, f64),
}

/// Fraction of the observed x-range padded onto each side when no explicit
/// domain is supplied.
const DOMAIN_PADDING: f64 = 0.05;

impl TruncatedSample {
    /// Validates raw `(u, v, x)` triplets into a sample.
    ///
    /// When `domain` is `None` it defaults to the observed x-range padded by
    /// 5% on each side, so the density is not forced to have support ending
    /// exactly at the extreme observations. Ties among x values are allowed.
    pub fn new(raw: &[(f64, f64, f64)], domain: Option<(f64, f64)>) -> Result<Self, ModelError> {
        if raw.is_empty() {
            return Err(ModelError::EmptySample);
        }
        let mut records = Vec::with_capacity(raw.len());
        for (index, &(u, v, x)) in raw.iter().enumerate() {
            if !(u.is_finite() && v.is_finite() && x.is_finite()) {
                return Err(ModelError::NonFiniteValue { index });
            }
            if !(u <= x && x <= v) {
                return Err(ModelError::ObservabilityViolation { index, u, v, x });
            }
            records.push(Record { u, v, x });
        }
        let (xmin, xmax) = records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.x), hi.max(r.x))
            });
        let domain = match domain {
            Some((lo, hi)) => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi && lo <= xmin && xmax <= hi) {
                    return Err(ModelError::InvalidDomain { lo, hi });
                }
                (lo, hi)
            }
            None => {
                // Degenerate spread (all x equal) still needs a usable interval.
                let range = (xmax - xmin).max(f64::EPSILON.sqrt() * (1.0 + xmax.abs()));
                (xmin - DOMAIN_PADDING * range, xmax + DOMAIN_PADDING * range)
            }
        };
        Ok(Self { records, domain })
    }

    /// Reads a sample from CSV with the exact header `u,v,x`.
    ///
    /// Any malformed or invalid row aborts ingestion with its line number
    /// (the header is line 1).
    pub fn from_csv_reader<R: Read>(
        reader: R,
        domain: Option<(f64, f64)>,
    ) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| ModelError::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        let expected = ["u", "v", "x"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(ModelError::Csv {
                line: 1,
                message: format!("expected header `u,v,x`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut raw = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| ModelError::Csv {
                line,
                message: e.to_string(),
            })?;
            if row.len() != 3 {
                return Err(ModelError::Csv {
                    line,
                    message: format!("expected 3 fields, got {}", row.len()),
                });
            }
            let mut vals = [0.0f64; 3];
            for (k, field) in row.iter().enumerate() {
                vals[k] = field.parse().map_err(|_| ModelError::Csv {
                    line,
                    message: format!("cannot parse `{field}` as a number"),
                })?;
            }
            raw.push((vals[0], vals[1], vals[2]));
        }
        // Re-map record-indexed validation errors to CSV line numbers.
        Self::new(&raw, domain).map_err(|e| match e {
            ModelError::ObservabilityViolation { index, u, v, x } => ModelError::Csv {
                line: index + 2,
                message: format!("x = {x} lies outside its truncation interval [{u}, {v}]"),
            },
            ModelError::NonFiniteValue { index } => ModelError::Csv {
                line: index + 2,
                message: "non-finite value".into(),
            },
            other => other,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn xs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.x).collect()
    }

    /// Derived observation-window lengths `v_i - u_i`.
    pub fn taus(&self) -> Vec<f64> {
        self.records.iter().map(Record::tau).collect()
    }

    /// Same records in a canonical order (sorted by `(x, u, v)`); used where
    /// results must not depend on record order.
    pub fn sorted(&self) -> Self {
        let mut records = self.records.clone();
        records.sort_by(|a, b| {
            (a.x, a.u, a.v)
                .partial_cmp(&(b.x, b.u, b.v))
                .expect("validated records are finite")
        });
        Self {
            records,
            domain: self.domain,
        }
    }
}

/// Equally spaced evaluation grid spanning a closed interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EvalGrid {
    points: Vec<f64>,
}

/// Grid size used throughout for reporting estimates.
pub const DEFAULT_GRID_COUNT: usize = 101;

impl EvalGrid {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self, ModelError> {
        if count < 2 {
            return Err(ModelError::InvalidGrid(count));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ModelError::InvalidDomain { lo, hi });
        }
        let step = (hi - lo) / (count - 1) as f64;
        let mut points: Vec<f64> = (0..count).map(|i| lo + step * i as f64).collect();
        // Endpoints exact regardless of rounding in the increment.
        points[0] = lo;
        points[count - 1] = hi;
        Ok(Self { points })
    }

    /// The default 101-point grid over the sample's domain.
    pub fn for_domain(domain: (f64, f64)) -> Self {
        Self::new(domain.0, domain.1, DEFAULT_GRID_COUNT).expect("valid domain")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        *self.points.last().unwrap()
    }
}

/// Trapezoid-rule integral of `values` tabulated on `grid`.
///
/// Exact for piecewise-linear integrands; linear in `values`.
pub fn trapezoid_integral(values: &[f64], grid: &EvalGrid) -> Result<f64, ModelError> {
    let pts = grid.points();
    if values.len() != pts.len() {
        return Err(ModelError::LengthMismatch {
            expected: pts.len(),
            got: values.len(),
        });
    }
    let mut sum = 0.0;
    for i in 0..pts.len() - 1 {
        sum += 0.5 * (values[i] + values[i + 1]) * (pts[i + 1] - pts[i]);
    }
    Ok(sum)
}

/// Density values tabulated on an evaluation grid.
///
/// Construction checks non-negativity only. Spline estimates integrate to one
/// by construction on their quadrature grid; kernel estimates may leak mass
/// outside the domain, so the grid integral of a valid estimate can be
/// slightly below one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    grid: EvalGrid,
    values: Vec<f64>,
}

impl DensityEstimate {
    pub fn new(grid: EvalGrid, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != grid.len() {
            return Err(ModelError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::NegativeDensity(i));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid mass over the grid.
    pub fn mass(&self) -> f64 {
        trapezoid_integral(&self.values, &self.grid).expect("lengths match by construction")
    }
}

/// Gauss–Legendre quadrature rule mapped onto `[lo, hi]`.
///
/// Nodes are strictly inside the interval; weights are positive and sum to
/// the interval length.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(size: usize, lo: f64, hi: f64) -> Self {
        assert!(size >= 2, "quadrature needs at least 2 nodes");
        assert!(lo < hi, "invalid interval");
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut nodes = vec![0.0; size];
        let mut weights = vec![0.0; size];
        let n = size as f64;
        // Roots of P_n by Newton iteration from the Chebyshev-like initial guess.
        for k in 0..size.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_deriv(size, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[k] = mid - half * x;
            nodes[size - 1 - k] = mid + half * x;
            weights[k] = half * w;
            weights[size - 1 - k] = half * w;
        }
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Value and derivative of the Legendre polynomial `P_n` at `x`.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn single_valid_record() {
        let s = TruncatedSample::new(&[(0.4, 2.0, 0.75)], None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.records()[0].x, 0.75);
    }

    #[test]
    fn observability_violation_reports_index() {
        let err = TruncatedSample::new(&[(0.4, 2.0, 0.3)], None).unwrap_err();
        match err {
            ModelError::ObservabilityViolation { index, .. } => assert_eq!(index, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(matches!(
            TruncatedSample::new(&[], None),
            Err(ModelError::EmptySample)
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let err = TruncatedSample::new(&[(0.0, 1.0, 0.5), (0.0, f64::NAN, 0.5)], None).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteValue { index: 1 }));
    }

    /// Paper's seven-record toy dataset; window lengths are a derived field.
    #[test]
    fn table1_taus() {
        let s = TruncatedSample::new(&table1(), None).unwrap();
        assert_eq!(s.len(), 7);
        let taus = s.taus();
        let expected = [1.6, 1.1, 1.0, 2.3, 1.3, 1.9, 0.95];
        for (t, e) in taus.iter().zip(expected) {
            assert_abs_diff_eq!(*t, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn revalidation_is_idempotent() {
        let s = TruncatedSample::new(&table1(), None).unwrap();
        let raw: Vec<_> = s.records().iter().map(|r| (r.u, r.v, r.x)).collect();
        let s2 = TruncatedSample::new(&raw, Some(s.domain())).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn default_domain_pads_five_percent() {
        let s = TruncatedSample::new(&[(0.0, 1.0, 0.2), (0.0, 1.0, 0.8)], None).unwrap();
        let (lo, hi) = s.domain();
        assert_abs_diff_eq!(lo, 0.2 - 0.05 * 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.8 + 0.05 * 0.6, epsilon = 1e-12);
    }

    #[test]
    fn explicit_domain_must_contain_xs() {
        let err = TruncatedSample::new(&[(0.0, 1.0, 0.9)], Some((0.0, 0.5))).unwrap_err();
        assert!(matches!(err, ModelError::InvalidDomain { .. }));
    }

    #[test]
    fn csv_round_trip_and_line_errors() {
        let ok = "u,v,x\n0.4,2.0,0.75\n0.3,1.4,1.05\n";
        let s = TruncatedSample::from_csv_reader(ok.as_bytes(), None).unwrap();
        assert_eq!(s.len(), 2);

        let bad_value = "u,v,x\n0.4,2.0,0.75\n0.3,1.4,oops\n";
        match TruncatedSample::from_csv_reader(bad_value.as_bytes(), None) {
            Err(ModelError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let bad_row = "u,v,x\n0.4,2.0,3.5\n";
        match TruncatedSample::from_csv_reader(bad_row.as_bytes(), None) {
            Err(ModelError::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }

        let bad_header = "a,b,c\n0.4,2.0,0.75\n";
        assert!(matches!(
            TruncatedSample::from_csv_reader(bad_header.as_bytes(), None),
            Err(ModelError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn grid_endpoints_and_spacing() {
        let g = EvalGrid::new(0.0, 1.0, 101).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g.lo(), 0.0);
        assert_eq!(g.hi(), 1.0);
        let step = g.points()[1] - g.points()[0];
        for w in g.points().windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], step, epsilon = 1e-12);
        }
    }

    #[test]
    fn trapezoid_constant_and_linear_are_exact() {
        let g = EvalGrid::new(0.0, 1.0, 101).unwrap();
        let ones = vec![1.0; g.len()];
        assert_abs_diff_eq!(trapezoid_integral(&ones, &g).unwrap(), 1.0, epsilon = 1e-14);
        let xs: Vec<f64> = g.points().to_vec();
        assert_abs_diff_eq!(trapezoid_integral(&xs, &g).unwrap(), 0.5, epsilon = 1e-14);
    }

    /// 6x(1-x) integrates to 1 exactly; the grid rule should be 1e-4 close.
    #[test]
    fn trapezoid_quadratic_close_to_exact() {
        let g = EvalGrid::new(0.0, 1.0, 101).unwrap();
        let vals: Vec<f64> = g.points().iter().map(|&x| 6.0 * x * (1.0 - x)).collect();
        let got = trapezoid_integral(&vals, &g).unwrap();
        assert!((got - 1.0).abs() < 1e-4, "got {got}");
    }

    #[test]
    fn trapezoid_length_mismatch() {
        let g = EvalGrid::new(0.0, 1.0, 11).unwrap();
        assert!(matches!(
            trapezoid_integral(&[1.0; 10], &g),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let q = GaussLegendre::new(10, 0.0, 1.0);
        assert_abs_diff_eq!(q.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        // degree 19 is exact for a 10-node rule
        assert_abs_diff_eq!(q.integrate(|x| x.powi(19)), 1.0 / 20.0, epsilon = 1e-13);
        let q2 = GaussLegendre::new(200, -2.0, 3.0);
        assert_abs_diff_eq!(q2.weights().iter().sum::<f64>(), 5.0, epsilon = 1e-11);
        assert_abs_diff_eq!(q2.integrate(|x| x * x), (27.0 + 8.0) / 3.0, epsilon = 1e-10);
        assert!(q2.nodes().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn density_estimate_rejects_negative_values() {
        let g = EvalGrid::new(0.0, 1.0, 3).unwrap();
        assert!(matches!(
            DensityEstimate::new(g, vec![0.5, -0.1, 0.5]),
            Err(ModelError::NegativeDensity(1))
        ));
    }

    pub(crate) fn table1() -> Vec<(f64, f64, f64)> {
        vec![
            (0.4, 2.0, 0.75),
            (0.3, 1.4, 1.05),
            (0.8, 1.8, 1.25),
            (0.0, 2.3, 1.5),
            (1.3, 2.6, 2.25),
            (1.1, 3.0, 2.4),
            (2.45, 3.4, 2.5),
        ]
    }

    proptest! {
        /// Linearity of the trapezoid rule in its integrand.
        #[test]
        fn trapezoid_is_linear(
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            vals1 in proptest::collection::vec(-10.0f64..10.0, 21),
            vals2 in proptest::collection::vec(-10.0f64..10.0, 21),
        ) {
            let g = EvalGrid::new(0.0, 2.0, 21).unwrap();
            let combo: Vec<f64> = vals1.iter().zip(&vals2).map(|(p, q)| a * p + b * q).collect();
            let lhs = trapezoid_integral(&combo, &g).unwrap();
            let rhs = a * trapezoid_integral(&vals1, &g).unwrap()
                + b * trapezoid_integral(&vals2, &g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        /// Exactness for piecewise-linear integrands on the grid itself.
        #[test]
        fn trapezoid_exact_for_piecewise_linear(slope in -3.0f64..3.0, icept in -2.0f64..2.0) {
            let g = EvalGrid::new(-1.0, 1.0, 41).unwrap();
            let vals: Vec<f64> = g.points().iter().map(|&x| slope * x + icept).collect();
            let got = trapezoid_integral(&vals, &g).unwrap();
            prop_assert!((got - 2.0 * icept).abs() < 1e-12);
        }
    }
}
