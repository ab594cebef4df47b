//! Local solver: noisy projected SGD on a cubic-regularized second-order
//! model, with decaying step sizes and a weighted-average output maintained
//! online.
//!
//! The model around an anchor w is
//!
//!   phi(theta) = <g, theta - w> + 1/2 <H (theta - w), theta - w>
//!              + (M/6) ||theta - w||^3
//!
//! (the constant loss term at the anchor is dropped; it shifts nothing).
//! Iterates follow theta <- proj(theta - eta_s (grad + b_s)) with
//! eta_s = 2/(mu (s+2)) and per-coordinate Gaussian noise b_s. The returned
//! point is sum_{s=0}^{tau-1} 2(s+1)/(tau(tau+1)) theta_s, a convex
//! combination of projected iterates, so it stays feasible.

use crate::error::{Error, Result};
use crate::linalg::{self, SquareMatrix};
use crate::model::{BoxConstraint, ModelVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Hessian access: dense for small problems, factored when the curvature is
/// identity-plus-rank-one, which covers every loss model here. The solver
/// only ever needs H·v products.
#[derive(Debug, Clone)]
pub enum HessianOp {
    Dense(SquareMatrix),
    ScaledIdentityPlusOuter {
        scale: f64,
        coef: f64,
        vector: Vec<f64>,
    },
}

impl HessianOp {
    pub fn dim(&self) -> usize {
        match self {
            HessianOp::Dense(m) => m.dim(),
            HessianOp::ScaledIdentityPlusOuter { vector, .. } => vector.len(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            HessianOp::Dense(m) => m.matvec(v),
            HessianOp::ScaledIdentityPlusOuter { scale, coef, vector } => {
                let inner = coef * linalg::dot(vector, v);
                v.iter()
                    .zip(vector)
                    .map(|(vi, ai)| scale * vi + inner * ai)
                    .collect()
            }
        }
    }
}

/// Sampled second-order model anchored at the current global iterate.
#[derive(Debug, Clone)]
pub struct CubicModel {
    pub anchor: ModelVector,
    pub gradient: Vec<f64>,
    pub hessian: HessianOp,
    /// Cubic coefficient M; at least the Hessian-Lipschitz constant for the
    /// upper-bound property to hold.
    pub cubic_coef: f64,
    /// Strong-convexity constant driving the step-size schedule.
    pub mu: f64,
}

impl CubicModel {
    pub fn new(
        anchor: ModelVector,
        gradient: Vec<f64>,
        hessian: HessianOp,
        cubic_coef: f64,
        mu: f64,
    ) -> Result<Self> {
        let d = anchor.dim();
        if gradient.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: gradient.len(),
            });
        }
        if hessian.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: hessian.dim(),
            });
        }
        if !cubic_coef.is_finite() || cubic_coef <= 0.0 {
            return Err(Error::Config("cubic coefficient must be positive".into()));
        }
        if !mu.is_finite() || mu <= 0.0 {
            return Err(Error::Config("mu must be positive".into()));
        }
        Ok(Self {
            anchor,
            gradient,
            hessian,
            cubic_coef,
            mu,
        })
    }
}

/// Solver knobs: local iteration count and per-coordinate noise variance.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub tau: usize,
    pub sigma_sq: f64,
}

impl SolverConfig {
    pub fn new(tau: usize, sigma_sq: f64) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !sigma_sq.is_finite() || sigma_sq < 0.0 {
            return Err(Error::Config("sigma_sq must be nonnegative".into()));
        }
        Ok(Self { tau, sigma_sq })
    }
}

/// Gradient of the cubic model at theta:
/// g + H (theta - anchor) + (M/2) ||theta - anchor|| (theta - anchor).
pub fn cubic_gradient(cm: &CubicModel, theta: &ModelVector) -> Vec<f64> {
    let disp = linalg::sub(&theta.coords, &cm.anchor.coords);
    let mut grad = cm.hessian.apply(&disp);
    let half_m_norm = 0.5 * cm.cubic_coef * linalg::norm(&disp);
    for ((gi, di), g0) in grad.iter_mut().zip(&disp).zip(&cm.gradient) {
        *gi += g0 + half_m_norm * di;
    }
    grad
}

/// Model value at theta relative to the anchor (constant term omitted).
pub fn cubic_value(cm: &CubicModel, theta: &ModelVector) -> f64 {
    let disp = linalg::sub(&theta.coords, &cm.anchor.coords);
    let h_disp = cm.hessian.apply(&disp);
    let n = linalg::norm(&disp);
    linalg::dot(&cm.gradient, &disp)
        + 0.5 * linalg::dot(&h_disp, &disp)
        + cm.cubic_coef / 6.0 * n * n * n
}

/// One fold of the online weighted average: merge iterate number `s`
/// (0-indexed, s >= 1; the s = 0 iterate seeds the state) with weight
/// 2/(s+2). After folding iterates 1..tau-1 the state equals
/// sum_{s=0}^{tau-1} 2(s+1)/(tau(tau+1)) theta_s.
pub fn weighted_average_state(prev: &[f64], theta_s: &[f64], s: usize) -> Vec<f64> {
    assert!(s >= 1, "iterate index must be at least 1");
    let rho = 2.0 / (s as f64 + 2.0);
    prev.iter()
        .zip(theta_s)
        .map(|(z, t)| rho * t + (1.0 - rho) * z)
        .collect()
}

/// Run the solver: tau iterations from the anchor, returning the weighted
/// average of the visited iterates. Noise is drawn per coordinate from
/// N(0, sigma_sq) on every update, even though only masked coordinates
/// survive the uplink; the privacy accountant matches this.
pub fn solve<R: Rng>(
    cm: &CubicModel,
    bounds: &BoxConstraint,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<ModelVector> {
    let d = cm.anchor.dim();
    if bounds.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: bounds.dim(),
        });
    }
    if !bounds.contains(&cm.anchor) {
        return Err(Error::Config("solver anchor lies outside the box".into()));
    }
    let noise = if cfg.sigma_sq > 0.0 {
        Some(Normal::new(0.0, cfg.sigma_sq.sqrt()).expect("valid std"))
    } else {
        None
    };

    let mut theta = cm.anchor.clone();
    let mut avg = theta.coords.clone();
    for s in 0..cfg.tau.saturating_sub(1) {
        let eta = 2.0 / (cm.mu * (s as f64 + 2.0));
        let mut step = cubic_gradient(cm, &theta);
        if let Some(n) = &noise {
            for g in step.iter_mut() {
                *g += n.sample(rng);
            }
        }
        linalg::add_scaled(&mut theta.coords, -eta, &step);
        theta = bounds.project(&theta);
        avg = weighted_average_state(&avg, &theta.coords, s + 1);
    }
    Ok(ModelVector::new(avg))
}
