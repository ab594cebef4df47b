//! Loss-model oracles, datasets, and box-constraint geometry.
//!
//! Two loss models are supported. The logistic model is the experiment
//! workload: per-sample loss `log(1 + exp(-b aᵀx)) + ½‖x‖²`, which keeps
//! every per-sample loss 1-strongly convex. The quadratic model
//! `½‖x - a‖²` (center = the sample's feature vector) is the analytic
//! sanity workload with constant Hessian.

use crate::error::{Error, Result};
use crate::linalg::{self, SquareMatrix};

/// One labeled example: features `a` and label `b ∈ {-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl DataSample {
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(Error::Config(format!("label must be -1 or +1, got {label}")));
        }
        Ok(Self { features, label })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// A client's local dataset: nonempty, uniform dimension.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    samples: Vec<DataSample>,
}

impl ClientDataset {
    pub fn new(samples: Vec<DataSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("client dataset must hold at least one sample".into()))?;
        let d = first.dim();
        for s in &samples {
            if s.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: s.dim(),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    pub fn get(&self, idx: usize) -> &DataSample {
        &self.samples[idx]
    }

    pub fn samples(&self) -> &[DataSample] {
        &self.samples
    }
}

/// Axis-aligned feasible box with the diameter constant used by the
/// calibration formulas. The diameter is configuration, not derived from
/// the bounds: the experiment protocol fixes both independently.
#[derive(Debug, Clone)]
pub struct BoxConstraint {
    lower: Vec<f64>,
    upper: Vec<f64>,
    diameter: f64,
}

impl BoxConstraint {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, diameter: f64) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if !diameter.is_finite() || diameter <= 0.0 {
            return Err(Error::Config("box diameter must be positive".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::Config(format!(
                    "box requires lower < upper per coordinate, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            diameter,
        })
    }

    /// Symmetric box `[-half_width, half_width]^d`.
    pub fn symmetric(d: usize, half_width: f64, diameter: f64) -> Result<Self> {
        Self::new(vec![-half_width; d], vec![half_width; d], diameter)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Euclidean projection onto the box: an elementwise clamp.
    pub fn project(&self, x: &ModelVector) -> ModelVector {
        let coords = x
            .coords
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect();
        ModelVector { coords }
    }

    pub fn contains(&self, x: &ModelVector) -> bool {
        x.coords
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// A point in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    pub coords: Vec<f64>,
}

impl ModelVector {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            coords: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }
}

/// Curvature and Lipschitz constants declared for a loss model. These are
/// configuration: the experiment protocol fixes them rather than estimating
/// them from data.
#[derive(Debug, Clone, Copy)]
pub struct LossConstants {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub mu: f64,
    pub per_coord_grad_bound: f64,
    pub per_row_hess_bound: f64,
}

impl LossConstants {
    pub fn new(l0: f64, l1: f64, l2: f64, mu: f64, d: usize) -> Result<Self> {
        for (name, v) in [("l0", l0), ("l1", l1), ("l2", l2), ("mu", mu)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be strictly positive")));
            }
        }
        if mu > l1 {
            return Err(Error::Config(format!(
                "mu ({mu}) must not exceed the smoothness constant l1 ({l1})"
            )));
        }
        let sqrt_d = (d as f64).sqrt();
        Ok(Self {
            l0,
            l1,
            l2,
            mu,
            per_coord_grad_bound: l0 / sqrt_d,
            per_row_hess_bound: l1 / sqrt_d,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Per-sample differentiable loss oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossModel {
    /// log(1 + exp(-b aᵀx)) + ½‖x‖²
    LogisticL2,
    /// ½‖x - a‖², the sample features acting as the center.
    Quadratic,
}

impl LossModel {
    fn check_dims(x: &ModelVector, s: &DataSample) -> Result<()> {
        if x.dim() != s.dim() {
            return Err(Error::Dimension {
                expected: x.dim(),
                got: s.dim(),
            });
        }
        Ok(())
    }

    pub fn value(&self, x: &ModelVector, s: &DataSample) -> Result<f64> {
        Self::check_dims(x, s)?;
        match self {
            LossModel::LogisticL2 => {
                let z = s.label * linalg::dot(&s.features, &x.coords);
                Ok(softplus(-z) + 0.5 * linalg::dot(&x.coords, &x.coords))
            }
            LossModel::Quadratic => {
                let diff = linalg::sub(&x.coords, &s.features);
                Ok(0.5 * linalg::dot(&diff, &diff))
            }
        }
    }

    pub fn gradient(&self, x: &ModelVector, s: &DataSample) -> Result<Vec<f64>> {
        Self::check_dims(x, s)?;
        match self {
            LossModel::LogisticL2 => {
                let z = s.label * linalg::dot(&s.features, &x.coords);
                let coef = -s.label * sigmoid(-z);
                Ok(x.coords
                    .iter()
                    .zip(&s.features)
                    .map(|(xi, ai)| coef * ai + xi)
                    .collect())
            }
            LossModel::Quadratic => Ok(linalg::sub(&x.coords, &s.features)),
        }
    }

    pub fn hessian(&self, x: &ModelVector, s: &DataSample) -> Result<SquareMatrix> {
        Self::check_dims(x, s)?;
        let d = x.dim();
        match self {
            LossModel::LogisticL2 => {
                let z = s.label * linalg::dot(&s.features, &x.coords);
                let coef = sigmoid(z) * sigmoid(-z);
                let mut h = SquareMatrix::identity(d);
                h.add_outer(coef, &s.features);
                Ok(h)
            }
            LossModel::Quadratic => Ok(SquareMatrix::identity(d)),
        }
    }

    /// Hessian as (scale·I + coef·a aᵀ), which is all the local solver needs.
    /// Matches `hessian` exactly; avoids materializing d×d storage.
    pub fn hessian_factors(&self, x: &ModelVector, s: &DataSample) -> Result<(f64, f64, Vec<f64>)> {
        Self::check_dims(x, s)?;
        match self {
            LossModel::LogisticL2 => {
                let z = s.label * linalg::dot(&s.features, &x.coords);
                Ok((1.0, sigmoid(z) * sigmoid(-z), s.features.clone()))
            }
            LossModel::Quadratic => Ok((1.0, 0.0, vec![0.0; x.dim()])),
        }
    }
}

/// f(x) = (1/n) Σ_i (1/m_i) Σ_j l(x, ζ_i^(j)).
pub fn global_loss(model: LossModel, clients: &[ClientDataset], x: &ModelVector) -> Result<f64> {
    let mut total = 0.0;
    for c in clients {
        let mut local = 0.0;
        for s in c.samples() {
            local += model.value(x, s)?;
        }
        total += local / c.len() as f64;
    }
    Ok(total / clients.len() as f64)
}

/// ∇f(x) over all clients.
pub fn global_gradient(
    model: LossModel,
    clients: &[ClientDataset],
    x: &ModelVector,
) -> Result<Vec<f64>> {
    let d = x.dim();
    let mut grad = vec![0.0; d];
    for c in clients {
        let mut local = vec![0.0; d];
        for s in c.samples() {
            let g = model.gradient(x, s)?;
            linalg::add_scaled(&mut local, 1.0, &g);
        }
        linalg::add_scaled(&mut grad, 1.0 / c.len() as f64, &local);
    }
    let inv_n = 1.0 / clients.len() as f64;
    Ok(linalg::scale(&grad, inv_n))
}

/// Result of the deterministic baseline solve.
#[derive(Debug, Clone)]
pub struct ReferenceOptimum {
    pub point: ModelVector,
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

const REFERENCE_ITER_CAP: usize = 1_000_000;
/// Step used in the stationarity residual ‖x - Π(x - γ∇f(x))‖.
const RESIDUAL_STEP: f64 = 0.5;

/// Deterministic projected full-gradient descent with backtracking.
/// Independent of the stochastic pipeline; its value anchors the
/// suboptimality curves.
pub fn reference_optimum(
    clients: &[ClientDataset],
    model: LossModel,
    bounds: &BoxConstraint,
    tol: f64,
) -> Result<ReferenceOptimum> {
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::Config("reference tolerance must be positive".into()));
    }
    if clients.is_empty() {
        return Err(Error::Config("reference optimum needs at least one client".into()));
    }
    let d = bounds.dim();
    let mut x = bounds.project(&ModelVector::zeros(d));
    let mut fx = global_loss(model, clients, &x)?;
    let mut step = 1.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0usize;
    let mut stalled = false;

    // Backtracking phase: large adaptive steps while f still registers
    // descent at float resolution.
    while iterations < REFERENCE_ITER_CAP {
        iterations += 1;
        let grad = global_gradient(model, clients, &x)?;
        let mut probe = x.clone();
        linalg::add_scaled(&mut probe.coords, -RESIDUAL_STEP, &grad);
        let probe = bounds.project(&probe);
        residual = linalg::norm(&linalg::sub(&x.coords, &probe.coords));
        if residual <= tol {
            return Ok(ReferenceOptimum {
                point: x,
                value: fx,
                residual,
                iterations,
            });
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = x.clone();
            linalg::add_scaled(&mut cand.coords, -step, &grad);
            let cand = bounds.project(&cand);
            let fc = global_loss(model, clients, &cand)?;
            if fc < fx {
                x = cand;
                fx = fc;
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
    }

    // Polish phase: f sits on its float plateau, but fixed-step projected
    // iterations still contract the stationarity residual.
    if stalled {
        let noise = 1e-13 * fx.abs().max(1.0);
        while iterations < REFERENCE_ITER_CAP {
            iterations += 1;
            let grad = global_gradient(model, clients, &x)?;
            let mut probe = x.clone();
            linalg::add_scaled(&mut probe.coords, -RESIDUAL_STEP, &grad);
            let probe = bounds.project(&probe);
            residual = linalg::norm(&linalg::sub(&x.coords, &probe.coords));
            if residual <= tol {
                return Ok(ReferenceOptimum {
                    point: x,
                    value: fx,
                    residual,
                    iterations,
                });
            }
            let fc = global_loss(model, clients, &probe)?;
            if fc > fx + noise {
                // the fixed step overshoots for this problem's curvature
                break;
            }
            x = probe;
            fx = fc;
        }
    }
    Err(Error::NonConvergence { residual })
}
