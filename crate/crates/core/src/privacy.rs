//! Gaussian-mechanism calibration, subsampling amplification, heterogeneous
//! advanced composition, and an auditable ledger.
//!
//! The accountant mirrors the release path of the training loop: every local
//! solver iteration is one Gaussian mechanism over the k masked coordinates,
//! amplified by the 1-of-m uniform sample selection, and all tau*T iterations
//! compose into the run total. Natural logarithms throughout.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::E;

/// Target privacy parameters. All three live in (0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta0: f64,
    pub delta_hat: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta0: f64, delta_hat: f64) -> Result<Self> {
        for (name, v) in [("epsilon", epsilon), ("delta0", delta0), ("delta_hat", delta_hat)] {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(Self {
            epsilon,
            delta0,
            delta_hat,
        })
    }
}

/// Output of noise calibration, carrying every input for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseCalibration {
    /// Per-coordinate Gaussian variance sigma^2.
    pub sigma_sq: f64,
    /// l2-sensitivity of one masked noisy gradient release.
    pub sensitivity: f64,
    pub k: usize,
    pub d: usize,
    pub tau: usize,
    pub t_rounds: usize,
    pub m: usize,
    pub epsilon: f64,
    pub delta0: f64,
    pub l0: f64,
    pub l1: f64,
    pub diameter: f64,
}

/// l2-sensitivity of the k-coordinate masked gradient release:
/// 2 sqrt(k/d) (L0 + L1 D). Sparsification shrinks the conventional
/// 2 (L0 + L1 D) by sqrt(k/d).
pub fn sensitivity(k: usize, d: usize, l0: f64, l1: f64, diameter: f64) -> f64 {
    2.0 * (k as f64 / d as f64).sqrt() * (l0 + l1 * diameter)
}

/// Smallest per-coordinate variance meeting the privacy target:
///
///   sigma^2 = 160 tau T k ln(1.25/delta0) (L0 + L1 D)^2 / (eps^2 m^2 d)
///
/// taken with equality. Requires the side condition T >= eps^2 / (4 tau).
#[allow(clippy::too_many_arguments)]
pub fn calibrate_noise(
    p: &DpParams,
    k: usize,
    d: usize,
    tau: usize,
    t_rounds: usize,
    m: usize,
    l0: f64,
    l1: f64,
    diameter: f64,
) -> Result<NoiseCalibration> {
    if k == 0 || k > d {
        return Err(Error::Calibration(format!("k={k} out of range [1, {d}]")));
    }
    if tau == 0 || m == 0 {
        return Err(Error::Calibration("tau and m must be at least 1".into()));
    }
    let side = p.epsilon * p.epsilon / (4.0 * tau as f64);
    if (t_rounds as f64) < side {
        return Err(Error::Calibration(format!(
            "side condition violated: T = {t_rounds} < eps^2/(4 tau) = {side}"
        )));
    }
    let unit = l0 + l1 * diameter;
    let sigma_sq = 160.0 * tau as f64 * t_rounds as f64 * k as f64 * (1.25 / p.delta0).ln()
        * unit
        * unit
        / (p.epsilon * p.epsilon * (m as f64) * (m as f64) * d as f64);
    Ok(NoiseCalibration {
        sigma_sq,
        sensitivity: sensitivity(k, d, l0, l1, diameter),
        k,
        d,
        tau,
        t_rounds,
        m,
        epsilon: p.epsilon,
        delta0: p.delta0,
        l0,
        l1,
        diameter,
    })
}

/// Privacy loss of a single solver iteration against the sampled instance:
///
///   eps_s = 2 sqrt(2 k ln(1.25/delta0)) (L0 + L1 D) / (sigma sqrt(d))
///
/// This is the Gaussian-mechanism epsilon at the sparsification-reduced
/// sensitivity.
pub fn per_step_epsilon(cal: &NoiseCalibration, delta0: f64) -> f64 {
    let unit = cal.l0 + cal.l1 * cal.diameter;
    2.0 * (2.0 * cal.k as f64 * (1.25 / delta0).ln()).sqrt() * unit
        / (cal.sigma_sq.sqrt() * (cal.d as f64).sqrt())
}

/// Amplification from computing on 1 uniformly chosen record out of m:
/// (eps, delta) -> (ln(1 + (e^eps - 1)/m), delta/m).
pub fn amplify_by_subsampling(eps: f64, delta: f64, m: usize) -> (f64, f64) {
    let m_f = m as f64;
    ((eps.exp_m1() / m_f).ln_1p(), delta / m_f)
}

/// Advanced composition of heterogeneous (eps_t, delta_t) steps:
///
///   eps_total  = sqrt(sum_t 2 eps_t^2 ln(e + sqrt(sum_t eps_t^2)/delta_hat)) + sum_t eps_t^2
///   delta_total = 1 - (1 - delta_hat) prod_t (1 - delta_t)
///
/// Every step must satisfy eps_t in (0, 0.9] and delta_t in (0, 1].
pub fn compose(steps: &[(f64, f64)], delta_hat: f64) -> Result<(f64, f64)> {
    if steps.is_empty() {
        return Ok((0.0, 0.0));
    }
    if !(delta_hat > 0.0 && delta_hat <= 1.0) {
        return Err(Error::Composition(format!(
            "delta_hat must lie in (0, 1], got {delta_hat}"
        )));
    }
    let mut sum_sq = 0.0;
    let mut log_one_minus = 0.0;
    for &(eps, delta) in steps {
        if !(eps > 0.0 && eps <= 0.9) {
            return Err(Error::Composition(format!(
                "per-step eps must lie in (0, 0.9], got {eps}"
            )));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Composition(format!(
                "per-step delta must lie in (0, 1], got {delta}"
            )));
        }
        sum_sq += eps * eps;
        log_one_minus += (-delta).ln_1p();
    }
    let log_factor = (E + sum_sq.sqrt() / delta_hat).ln();
    let mut weighted = 0.0;
    for &(eps, _) in steps {
        weighted += 2.0 * eps * eps * log_factor;
    }
    let eps_total = weighted.sqrt() + sum_sq;
    let delta_total = 1.0 - (1.0 - delta_hat) * log_one_minus.exp();
    Ok((eps_total, delta_total))
}

/// Per-run privacy record: every amplified step, the composed totals, and
/// whether the run stayed within its target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub per_step_eps: Vec<f64>,
    pub per_step_delta: Vec<f64>,
    pub composed_eps: f64,
    pub composed_delta: f64,
    pub budget_eps: f64,
    pub valid: bool,
    pub violations: Vec<String>,
}

impl PrivacyLedger {
    /// JSON document for audit tooling:
    /// {inputs, per_step: [...], composed: {eps, delta}, valid: bool}
    pub fn export_json(&self, cal: &NoiseCalibration) -> serde_json::Value {
        serde_json::json!({
            "inputs": cal,
            "per_step": self
                .per_step_eps
                .iter()
                .zip(&self.per_step_delta)
                .map(|(e, d)| serde_json::json!({"eps": e, "delta": d}))
                .collect::<Vec<_>>(),
            "composed": {"eps": self.composed_eps, "delta": self.composed_delta},
            "valid": self.valid,
            "violations": self.violations,
        })
    }
}

/// Build the full tau*T-step ledger for a calibration and check it against
/// the target. Steps are identical: eps_s amplified by 1/m subsampling.
/// delta_hat for composition is sqrt(sum of squared amplified epsilons),
/// clamped into (0, 1] with a recorded violation when the clamp bites.
pub fn audit_total(cal: &NoiseCalibration, p: &DpParams) -> PrivacyLedger {
    let steps = cal.tau * cal.t_rounds;
    if steps == 0 {
        return PrivacyLedger {
            per_step_eps: Vec::new(),
            per_step_delta: Vec::new(),
            composed_eps: 0.0,
            composed_delta: 0.0,
            budget_eps: p.epsilon,
            valid: true,
            violations: Vec::new(),
        };
    }
    let eps_s = per_step_epsilon(cal, p.delta0);
    let (eps_amp, delta_amp) = amplify_by_subsampling(eps_s, p.delta0, cal.m);

    let mut violations = Vec::new();
    if eps_amp > 0.9 {
        violations.push(format!(
            "amplified per-step eps {eps_amp:.6} exceeds the 0.9 composition precondition"
        ));
    }

    let sum_sq = eps_amp * eps_amp * steps as f64;
    let mut delta_hat = sum_sq.sqrt();
    if delta_hat > 1.0 {
        violations.push(format!(
            "delta_hat sqrt(sum eps'^2) = {delta_hat:.6} exceeds 1; clamped for composition"
        ));
        delta_hat = 1.0;
    }

    let log_factor = (E + sum_sq.sqrt() / delta_hat).ln();
    let composed_eps = (2.0 * sum_sq * log_factor).sqrt() + sum_sq;
    let composed_delta =
        1.0 - (1.0 - delta_hat) * ((-delta_amp).ln_1p() * steps as f64).exp();

    if composed_eps > p.epsilon {
        violations.push(format!(
            "composed eps {composed_eps:.6} exceeds budget {:.6}",
            p.epsilon
        ));
    }

    PrivacyLedger {
        per_step_eps: vec![eps_amp; steps],
        per_step_delta: vec![delta_amp; steps],
        composed_eps,
        composed_delta,
        budget_eps: p.epsilon,
        valid: violations.is_empty(),
        violations,
    }
}

/// Running prefix of the composed spend for a homogeneous step schedule.
/// Used to stamp per-round records without recomposing the whole list.
#[derive(Debug, Clone)]
pub struct SpendTracker {
    step_eps: f64,
    step_delta: f64,
    count: usize,
}

impl SpendTracker {
    pub fn new(cal: &NoiseCalibration, p: &DpParams) -> Self {
        let eps_s = per_step_epsilon(cal, p.delta0);
        let (step_eps, step_delta) = amplify_by_subsampling(eps_s, p.delta0, cal.m);
        Self {
            step_eps,
            step_delta,
            count: 0,
        }
    }

    pub fn add_steps(&mut self, n: usize) {
        self.count += n;
    }

    /// Composed (eps, delta) for the steps taken so far.
    pub fn totals(&self) -> (f64, f64) {
        if self.count == 0 {
            return (0.0, 0.0);
        }
        let sum_sq = self.step_eps * self.step_eps * self.count as f64;
        let delta_hat = sum_sq.sqrt().min(1.0);
        let log_factor = (E + sum_sq.sqrt() / delta_hat).ln();
        let eps = (2.0 * sum_sq * log_factor).sqrt() + sum_sq;
        let delta =
            1.0 - (1.0 - delta_hat) * ((-self.step_delta).ln_1p() * self.count as f64).exp();
        (eps, delta)
    }
}
