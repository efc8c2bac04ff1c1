//! Finite-dimensional basis for the log-density.
//!
//! The working domain is rescaled to `[0, 1]`. The penalty is the cubic
//! smoothing-spline seminorm `J(eta) = int (eta'')^2` on the rescaled domain,
//! with side condition `int eta = 0` under the uniform average. Scaled
//! Bernoulli polynomials give the classical decomposition:
//!
//! * null space (zero penalty, zero mean): the span of `k1(t) = t - 1/2`;
//! * smooth part: representers `R1(z, t) = k2(z) k2(t) - k4(|z - t|)` of the
//!   penalty's reproducing kernel, anchored at `q` quantiles `z_j` of the
//!   observed values, so that `J(sum c_j R1(z_j, .)) = c' Q c` with
//!   `Q[i][j] = R1(z_i, z_j)`.
//!
//! Every basis function integrates to zero over `[0, 1]`, so the side
//! condition holds for the whole span by construction.
//!
//! All `int exp(eta)` terms share one composite Gauss–Legendre grid
//! (panels of four nodes). Per-record restrictions to a truncation window
//! clip the panels straddling the window ends by their overlap fraction,
//! which bounds the masking error by the square of the panel width.

use super::SplineError;
use crate::model::{GaussLegendre, TruncatedSample};
use nalgebra::{DMatrix, DVector};

#[inline]
fn k1(t: f64) -> f64 {
    t - 0.5
}

/// B2(t)/2 where B2 is the second Bernoulli polynomial.
#[inline]
fn k2(t: f64) -> f64 {
    let a = k1(t);
    (a * a - 1.0 / 12.0) / 2.0
}

/// B4(t)/24, evaluated at |s - t| (B4 is symmetric about 1/2, so folding the
/// fractional part of s - t into [0, 1] is the same as taking |s - t|).
#[inline]
fn k4_abs(d: f64) -> f64 {
    let a = d - 0.5;
    let a2 = a * a;
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

/// Reproducing kernel of the penalized (smooth) subspace.
#[inline]
pub(crate) fn representer(z: f64, t: f64) -> f64 {
    k2(z) * k2(t) - k4_abs((z - t).abs())
}

pub const DEFAULT_QUAD_SIZE: usize = 200;
const NODES_PER_PANEL: usize = 4;

/// Basis anchors, penalty gram matrix, and the shared quadrature grid.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    domain: (f64, f64),
    anchors: Vec<f64>, // rescaled to [0, 1], strictly increasing
    gram: DMatrix<f64>,
    quad_x: Vec<f64>, // nodes in x units
    quad_w: Vec<f64>, // weights in x units, summing to the domain length
    panel_edges: Vec<f64>,
    psi_quad: DMatrix<f64>, // quad_size x dim
}

/// Conventional scalable basis size.
pub fn default_anchor_count(n: usize) -> usize {
    n.min(30 + (10.0 * (n as f64).powf(2.0 / 9.0)).ceil() as usize)
}

impl SplineBasis {
    /// Builds the basis for a sample: `q` anchors at quantiles of the
    /// observed values (default [`default_anchor_count`]) and a composite
    /// Gauss–Legendre grid of `quad_size` nodes.
    pub fn build(
        sample: &TruncatedSample,
        q: Option<usize>,
        quad_size: usize,
    ) -> Result<Self, SplineError> {
        let mut xs = sample.xs();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        if xs.len() < 3 {
            return Err(SplineError::TooFewDistinctPoints(xs.len()));
        }
        let (lo, hi) = sample.domain();
        let scale = hi - lo;
        let q = q.unwrap_or_else(|| default_anchor_count(sample.len())).max(2);

        // Type-7 quantiles of the distinct sorted values, rescaled.
        let mut anchors: Vec<f64> = (0..q)
            .map(|j| {
                let p = j as f64 / (q - 1) as f64;
                let pos = p * (xs.len() - 1) as f64;
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                let x = if k + 1 < xs.len() {
                    xs[k] + frac * (xs[k + 1] - xs[k])
                } else {
                    xs[k]
                };
                (x - lo) / scale
            })
            .collect();
        anchors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        anchors.dedup();

        let qn = anchors.len();
        let mut gram = DMatrix::zeros(qn, qn);
        for i in 0..qn {
            for j in i..qn {
                let val = representer(anchors[i], anchors[j]);
                gram[(i, j)] = val;
                gram[(j, i)] = val;
            }
        }

        let panels = (quad_size / NODES_PER_PANEL).max(1);
        let mut quad_x = Vec::with_capacity(panels * NODES_PER_PANEL);
        let mut quad_w = Vec::with_capacity(panels * NODES_PER_PANEL);
        let mut panel_edges = Vec::with_capacity(panels + 1);
        let width = scale / panels as f64;
        for p in 0..panels {
            let a = lo + width * p as f64;
            panel_edges.push(a);
            let rule = GaussLegendre::new(NODES_PER_PANEL, a, a + width);
            quad_x.extend_from_slice(rule.nodes());
            quad_w.extend_from_slice(rule.weights());
        }
        panel_edges.push(hi);

        let dim = qn + 1;
        let mut psi_quad = DMatrix::zeros(quad_x.len(), dim);
        for (k, &x) in quad_x.iter().enumerate() {
            let t = (x - lo) / scale;
            psi_quad[(k, 0)] = k1(t);
            for (j, &z) in anchors.iter().enumerate() {
                psi_quad[(k, j + 1)] = representer(z, t);
            }
        }

        Ok(Self {
            domain: (lo, hi),
            anchors,
            gram,
            quad_x,
            quad_w,
            panel_edges,
            psi_quad,
        })
    }

    /// Number of coefficients: one null-space direction plus the anchors.
    pub fn dim(&self) -> usize {
        self.anchors.len() + 1
    }

    /// Dimension of the penalty null space after the side condition.
    pub fn null_dim(&self) -> usize {
        1
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// Penalty gram matrix over the smooth-part coefficients.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn quad_nodes(&self) -> &[f64] {
        &self.quad_x
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_w
    }

    pub(crate) fn panel_edges(&self) -> &[f64] {
        &self.panel_edges
    }

    pub(crate) fn nodes_per_panel(&self) -> usize {
        NODES_PER_PANEL
    }

    pub(crate) fn psi_quad(&self) -> &DMatrix<f64> {
        &self.psi_quad
    }

    /// Basis row `[k1(t), R1(z_1, t), ..., R1(z_q, t)]` at a point in x units.
    pub fn eval_row(&self, x: f64) -> DVector<f64> {
        let (lo, hi) = self.domain;
        let t = (x - lo) / (hi - lo);
        let mut row = DVector::zeros(self.dim());
        row[0] = k1(t);
        for (j, &z) in self.anchors.iter().enumerate() {
            row[j + 1] = representer(z, t);
        }
        row
    }

    /// Log-density values `eta(x) = psi(x)' theta` at arbitrary points.
    pub fn eta_at(&self, theta: &DVector<f64>, points: &[f64]) -> Vec<f64> {
        points
            .iter()
            .map(|&x| self.eval_row(x).dot(theta))
            .collect()
    }

    /// `eta` at the quadrature nodes.
    pub(crate) fn eta_quad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.psi_quad * theta
    }

    /// Normalizer `int exp(eta) dx` over the whole domain on the shared grid.
    pub fn normalizer(&self, eta_quad: &DVector<f64>) -> f64 {
        self.quad_w
            .iter()
            .zip(eta_quad.iter())
            .map(|(&w, &e)| w * e.exp())
            .sum()
    }
}
