//! Experiment configuration: a single JSON document holding every scalar of
//! the schedule and privacy formulas, plus seeds and dataset bindings.

use crate::error::{Error, Result};
use crate::privacy::{self, DpParams, NoiseCalibration};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Where the data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        d: usize,
        n_samples: usize,
        margin: f64,
        #[serde(default)]
        seed: u64,
    },
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        normalize: bool,
    },
}

/// Declared problem constants. The experiment protocol fixes these;
/// nothing estimates them from data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Constants {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    /// Cubic coefficient used by the local solver; defaults to l2.
    #[serde(default)]
    pub m_cubic: Option<f64>,
    /// Diameter constant in the sensitivity and schedule formulas.
    pub diameter: f64,
    pub mu: f64,
}

impl Constants {
    pub fn cubic_coef(&self) -> f64 {
        self.m_cubic.unwrap_or(self.l2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dpfcrn,
    Fedsgd,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Dpfcrn => "dpfcrn",
            Algorithm::Fedsgd => "fedsgd",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpfcrn" => Ok(Algorithm::Dpfcrn),
            "fedsgd" => Ok(Algorithm::Fedsgd),
            other => Err(Error::Config(format!("unknown algorithm \"{other}\""))),
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}
fn default_tau_max() -> usize {
    1_000_000
}
fn default_fedsgd_lr() -> f64 {
    1.0
}
fn default_ref_tol() -> f64 {
    1e-9
}

/// Full experiment description. Exactly one of `t_rounds` / `epochs` must be
/// set; everything the schedule and audit need is checkable before a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Number of clients.
    pub n: usize,
    /// Sparsification parameter: coordinates kept per uplink.
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub box_half_width: f64,
    pub constants: Constants,
    pub dp: DpParams,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub t_rounds: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    #[serde(default = "default_fedsgd_lr")]
    pub fedsgd_lr: f64,
    /// Tolerance for the deterministic reference solve.
    #[serde(default = "default_ref_tol")]
    pub ref_tol: f64,
    /// Starting point as a fraction of the box's upper corner; 0 starts at
    /// the origin, 1 at the corner (useful so convergence is visible).
    #[serde(default)]
    pub init_scale: f64,
    /// Run even when the audited total exceeds the target, keeping the
    /// flagged ledger in the outputs. Default off: invalid audits refuse.
    #[serde(default)]
    pub allow_invalid_ledger: bool,
    /// When set, every serialized uplink record is appended to
    /// `<output_dir>/uplink.bin` for replay.
    #[serde(default)]
    pub log_uplinks: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        let d = self.dim_hint();
        if let Some(d) = d {
            if self.k == 0 || self.k > d {
                return Err(Error::Config(format!(
                    "k={} out of range [1, {d}]",
                    self.k
                )));
            }
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !self.box_half_width.is_finite() || self.box_half_width <= 0.0 {
            return Err(Error::Config("box_half_width must be positive".into()));
        }
        DpParams::new(self.dp.epsilon, self.dp.delta0, self.dp.delta_hat)?;
        match (self.t_rounds, self.epochs) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of t_rounds / epochs, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config("one of t_rounds / epochs is required".into()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.tau_max == 0 {
            return Err(Error::Config("tau_max must be at least 1".into()));
        }
        if !self.fedsgd_lr.is_finite() || self.fedsgd_lr < 0.0 {
            return Err(Error::Config("fedsgd_lr must be nonnegative".into()));
        }
        if !self.init_scale.is_finite() || !(0.0..=1.0).contains(&self.init_scale) {
            return Err(Error::Config("init_scale must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("l0", self.constants.l0),
            ("l1", self.constants.l1),
            ("l2", self.constants.l2),
            ("diameter", self.constants.diameter),
            ("mu", self.constants.mu),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("constant {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Dimension when it is knowable without reading data.
    pub fn dim_hint(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Synthetic { d, .. } => Some(*d),
            DatasetSpec::Libsvm { .. } => None,
        }
    }

    /// Rounds: explicit, or epochs x m (one sample processed per client per
    /// round, so a local dataset is exhausted after m rounds).
    pub fn rounds(&self, m: usize) -> usize {
        match (self.t_rounds, self.epochs) {
            (Some(t), _) => t,
            (None, Some(e)) => e * m,
            (None, None) => unreachable!("validated"),
        }
    }
}

/// The derived run schedule, echoed into every manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub tau: usize,
    pub t_rounds: usize,
    pub sigma_sq: f64,
    pub m: usize,
    pub d: usize,
    pub calibration: NoiseCalibration,
}

impl Schedule {
    /// Degenerate schedule for a zero-round run: nothing executes, nothing
    /// is spent, and the audit of an empty step list is trivially valid.
    pub fn zero_rounds(cfg: &ExperimentConfig, m: usize, d: usize) -> Self {
        let c = &cfg.constants;
        Self {
            tau: 0,
            t_rounds: 0,
            sigma_sq: 0.0,
            m,
            d,
            calibration: NoiseCalibration {
                sigma_sq: 0.0,
                sensitivity: privacy::sensitivity(cfg.k, d, c.l0, c.l1, c.diameter),
                k: cfg.k,
                d,
                tau: 0,
                t_rounds: 0,
                m,
                epsilon: cfg.dp.epsilon,
                delta0: cfg.dp.delta0,
                l0: c.l0,
                l1: c.l1,
                diameter: c.diameter,
            },
        }
    }
}

/// tau before clamping:
///
///   tau = (L0 + L1 D + M D^2/2)^2 eps^2 m^2 / (k T ln(1/delta0) (L0 + L1 D)^2)
pub fn tau_formula(cfg: &ExperimentConfig, m: usize, t_rounds: usize) -> f64 {
    let c = &cfg.constants;
    let unit = c.l0 + c.l1 * c.diameter;
    let top = c.l0 + c.l1 * c.diameter + c.cubic_coef() * c.diameter * c.diameter / 2.0;
    top * top * cfg.dp.epsilon * cfg.dp.epsilon * (m as f64) * (m as f64)
        / (cfg.k as f64 * t_rounds as f64 * (1.0 / cfg.dp.delta0).ln() * unit * unit)
}

/// Derive (tau, T, sigma^2) for a run over clients holding m samples each in
/// dimension d. The baseline takes one local step per round at first-order
/// sensitivity (L1 treated as zero in the calibration), through the same
/// pipeline.
pub fn derive_schedule(cfg: &ExperimentConfig, m: usize, d: usize) -> Result<Schedule> {
    if cfg.k > d {
        return Err(Error::Config(format!("k={} exceeds dimension {d}", cfg.k)));
    }
    let t_rounds = cfg.rounds(m);
    if t_rounds == 0 {
        return Err(Error::Config("schedule requires at least one round".into()));
    }
    let c = &cfg.constants;
    let (tau, l1_for_noise) = match cfg.algorithm {
        Algorithm::Dpfcrn => {
            let raw = tau_formula(cfg, m, t_rounds);
            ((raw.ceil() as usize).clamp(1, cfg.tau_max), c.l1)
        }
        Algorithm::Fedsgd => (1, 0.0),
    };
    let side = cfg.dp.epsilon * cfg.dp.epsilon / (4.0 * tau as f64);
    if (t_rounds as f64) < side {
        return Err(Error::Calibration(format!(
            "side condition violated after clamping: T = {t_rounds} < eps^2/(4 tau) = {side}"
        )));
    }
    let calibration = privacy::calibrate_noise(
        &cfg.dp,
        cfg.k,
        d,
        tau,
        t_rounds,
        m,
        c.l0,
        l1_for_noise,
        c.diameter,
    )?;
    Ok(Schedule {
        tau,
        t_rounds,
        sigma_sq: calibration.sigma_sq,
        m,
        d,
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                d: 20,
                n_samples: 2000,
                margin: 4.0,
                seed: 0,
            },
            n: 10,
            k: 2,
            alpha: 1.0,
            box_half_width: 0.5,
            constants: Constants {
                l0: 0.1,
                l1: 1.0,
                l2: 0.1,
                m_cubic: Some(1.0),
                diameter: 0.1,
                mu: 1.0,
            },
            dp: DpParams {
                epsilon: 1.0,
                delta0: 0.01,
                delta_hat: 0.01,
            },
            algorithm: Algorithm::Dpfcrn,
            t_rounds: Some(100),
            epochs: None,
            seeds: vec![1],
            output_dir: None,
            tau_max: default_tau_max(),
            fedsgd_lr: 1.0,
            ref_tol: 1e-9,
            init_scale: 0.0,
            allow_invalid_ledger: false,
            log_uplinks: false,
        }
    }

    #[test]
    fn schedule_worked_example() {
        // eps=1, m=1000, k=10, T=100: tau = ceil(0.042025e6 / (1000 ln100 * 0.04))
        let mut cfg = base_config();
        cfg.k = 10;
        cfg.dataset = DatasetSpec::Synthetic {
            d: 100,
            n_samples: 10_000,
            margin: 4.0,
            seed: 0,
        };
        let sched = derive_schedule(&cfg, 1000, 100).unwrap();
        assert_eq!(sched.tau, 229);
        assert_eq!(sched.t_rounds, 100);
        // sigma^2 must be bit-identical to the calibration op
        let cal = privacy::calibrate_noise(&cfg.dp, 10, 100, 229, 100, 1000, 0.1, 1.0, 0.1)
            .unwrap();
        assert_eq!(sched.sigma_sq, cal.sigma_sq);
    }

    #[test]
    fn doubling_k_halves_tau_before_ceiling() {
        let mut cfg = base_config();
        cfg.k = 5;
        let a = tau_formula(&cfg, 1000, 100);
        cfg.k = 10;
        let b = tau_formula(&cfg, 1000, 100);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tau_clamps_to_configured_maximum() {
        let mut cfg = base_config();
        cfg.k = 10;
        cfg.tau_max = 3;
        let sched = derive_schedule(&cfg, 1000, 100).unwrap();
        assert_eq!(sched.tau, 3);
        assert_eq!(sched.calibration.tau, 3);
    }

    #[test]
    fn epochs_expand_to_rounds() {
        let mut cfg = base_config();
        cfg.t_rounds = None;
        cfg.epochs = Some(2);
        assert_eq!(cfg.rounds(200), 400);
    }

    #[test]
    fn fedsgd_schedule_is_single_step_first_order() {
        let mut cfg = base_config();
        cfg.algorithm = Algorithm::Fedsgd;
        let sched = derive_schedule(&cfg, 200, 20).unwrap();
        assert_eq!(sched.tau, 1);
        // first-order sensitivity: l1 plays no role
        assert_eq!(sched.calibration.l1, 0.0);
        let expected = privacy::calibrate_noise(&cfg.dp, 2, 20, 1, 100, 200, 0.1, 0.0, 0.1)
            .unwrap();
        assert_eq!(sched.sigma_sq, expected.sigma_sq);
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let text = r#"{
            "dataset": {"synthetic": {"d": 8, "n_samples": 80, "margin": 4.0}},
            "n": 4,
            "k": 2,
            "box_half_width": 0.5,
            "constants": {"l0": 0.1, "l1": 1.0, "l2": 0.1, "m_cubic": 1.0, "diameter": 0.1, "mu": 1.0},
            "dp": {"epsilon": 0.8, "delta0": 0.01, "delta_hat": 0.01},
            "algorithm": "dpfcrn",
            "epochs": 1,
            "seeds": [1, 2]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.alpha, 1.0);
        assert!(cfg.t_rounds.is_none());
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.k, cfg.k);
    }

    #[test]
    fn both_round_specs_rejected() {
        let mut cfg = base_config();
        cfg.epochs = Some(1);
        assert!(cfg.validate().is_err());
        cfg.t_rounds = None;
        cfg.epochs = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_epsilon_rejected() {
        let mut cfg = base_config();
        cfg.dp.epsilon = 1.5;
        assert!(cfg.validate().is_err());
    }
}
