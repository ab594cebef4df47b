//! Federated orchestration: broadcast, per-client sampling and local solve,
//! scaled-difference uplink with random-k sparsification, server-side
//! aggregation, plus the first-order noisy baseline.
//!
//! Rounds are sequential. Within a round each client's work depends only on
//! its own streams, and aggregation folds client updates in ascending index
//! order, so results do not depend on completion order.

use crate::config::{Algorithm, ExperimentConfig, Schedule};
use crate::error::{Error, Result};
use crate::gmsolver::{self, CubicModel, HessianOp, SolverConfig};
use crate::linalg;
use crate::model::{BoxConstraint, ClientDataset, DataSample, LossModel, ModelVector};
use crate::privacy::{self, PrivacyLedger, SpendTracker};
use crate::rng::{client_stream, StreamKind};
use crate::sparsify;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Everything a training run needs besides the config: the partitioned
/// clients, evaluation data, geometry, the derived schedule, and the
/// precomputed reference value anchoring suboptimality.
#[derive(Debug, Clone)]
pub struct Problem {
    pub clients: Vec<ClientDataset>,
    pub eval_samples: Vec<DataSample>,
    pub loss: LossModel,
    pub bounds: BoxConstraint,
    pub schedule: Schedule,
    pub ref_value: f64,
}

/// Per-round metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub suboptimality: f64,
    pub test_accuracy: f64,
    pub uplink_bytes: usize,
    pub eps_spent: f64,
    pub delta_spent: f64,
}

/// Output of one seeded run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub ledger: PrivacyLedger,
    pub final_model: ModelVector,
    /// Serialized uplink records, when logging was requested.
    pub uplink_log: Option<Vec<u8>>,
}

struct ClientStreams {
    data: ChaCha12Rng,
    noise: ChaCha12Rng,
    mask: ChaCha12Rng,
}

/// Mutable run state. One instance per (config, seed).
pub struct Federation<'a> {
    cfg: &'a ExperimentConfig,
    problem: &'a Problem,
    streams: Vec<ClientStreams>,
    global_model: ModelVector,
    round: usize,
    tracker: SpendTracker,
    uplink_log: Option<Vec<u8>>,
}

fn test_accuracy(samples: &[DataSample], x: &ModelVector) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| {
            let score = linalg::dot(&s.features, x.as_slice());
            (score >= 0.0) == (s.label > 0.0)
        })
        .count();
    correct as f64 / samples.len() as f64
}

impl<'a> Federation<'a> {
    pub fn new(cfg: &'a ExperimentConfig, problem: &'a Problem, seed: u64) -> Result<Self> {
        let d = problem.bounds.dim();
        if cfg.k == 0 || cfg.k > d {
            return Err(Error::Config(format!("k={} out of range [1, {d}]", cfg.k)));
        }
        if problem.clients.len() != cfg.n {
            return Err(Error::Config(format!(
                "problem holds {} clients, config says {}",
                problem.clients.len(),
                cfg.n
            )));
        }
        for c in &problem.clients {
            if c.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: c.dim(),
                });
            }
            if c.len() != problem.schedule.m {
                return Err(Error::Config(format!(
                    "client holds {} samples, schedule says m = {}",
                    c.len(),
                    problem.schedule.m
                )));
            }
        }
        let streams = (0..cfg.n as u32)
            .map(|i| ClientStreams {
                data: client_stream(seed, i, StreamKind::DataSampling),
                noise: client_stream(seed, i, StreamKind::SolverNoise),
                mask: client_stream(seed, i, StreamKind::Mask),
            })
            .collect();
        let start: Vec<f64> = problem
            .bounds
            .upper()
            .iter()
            .map(|hi| cfg.init_scale * hi)
            .collect();
        let global_model = problem.bounds.project(&ModelVector::new(start));
        Ok(Self {
            cfg,
            problem,
            streams,
            global_model,
            round: 0,
            tracker: SpendTracker::new(&problem.schedule.calibration, &cfg.dp),
            uplink_log: if cfg.log_uplinks { Some(Vec::new()) } else { None },
        })
    }

    pub fn model(&self) -> &ModelVector {
        &self.global_model
    }

    /// One communication round. Every client participates: a fresh sample,
    /// a local solve (or one noisy gradient for the baseline), a fresh mask
    /// at upload time, then a deterministic aggregation fold and a server
    /// projection back onto the box.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let d = self.problem.bounds.dim();
        let n = self.cfg.n;
        let sched = &self.problem.schedule;
        let mut increment = vec![0.0; d];
        let mut bytes = 0usize;

        for i in 0..n {
            let uplink = match self.cfg.algorithm {
                Algorithm::Dpfcrn => self.client_cubic_update(i)?,
                Algorithm::Fedsgd => self.client_gradient_update(i)?,
            };
            let streams = &mut self.streams[i];
            let mask = sparsify::sample_mask(d, self.cfg.k, &mut streams.mask)?;
            let update = sparsify::apply(&uplink, &mask, self.round as u32, i as u32)?;
            bytes += sparsify::wire_size(self.cfg.k);
            if let Some(log) = &mut self.uplink_log {
                log.extend_from_slice(&update.to_bytes());
            }
            linalg::add_scaled(&mut increment, 1.0 / n as f64, &sparsify::expand(&update));
        }

        let mut next = self.global_model.clone();
        match self.cfg.algorithm {
            Algorithm::Dpfcrn => linalg::add_scaled(&mut next.coords, 1.0, &increment),
            Algorithm::Fedsgd => {
                linalg::add_scaled(&mut next.coords, -self.cfg.fedsgd_lr, &increment)
            }
        }
        self.global_model = self.problem.bounds.project(&next);
        self.round += 1;
        self.tracker.add_steps(sched.tau);
        let (eps_spent, delta_spent) = self.tracker.totals();

        let f_now = crate::model::global_loss(
            self.problem.loss,
            &self.problem.clients,
            &self.global_model,
        )?;
        Ok(RoundRecord {
            round: self.round - 1,
            suboptimality: f_now - self.problem.ref_value,
            test_accuracy: test_accuracy(&self.problem.eval_samples, &self.global_model),
            uplink_bytes: bytes,
            eps_spent,
            delta_spent,
        })
    }

    /// Cubic route: y_i = alpha (x_{i,t+1} - x_t) with x_{i,t+1} from the
    /// local solver on the sampled second-order model.
    fn client_cubic_update(&mut self, i: usize) -> Result<Vec<f64>> {
        let sched = &self.problem.schedule;
        let c = &self.cfg.constants;
        let client = &self.problem.clients[i];
        let streams = &mut self.streams[i];
        let idx = streams.data.random_range(0..client.len());
        let sample = client.get(idx);

        let grad = self.problem.loss.gradient(&self.global_model, sample)?;
        let (scale, coef, vector) = self
            .problem
            .loss
            .hessian_factors(&self.global_model, sample)?;
        let cm = CubicModel::new(
            self.global_model.clone(),
            grad,
            HessianOp::ScaledIdentityPlusOuter { scale, coef, vector },
            c.cubic_coef(),
            c.mu,
        )?;
        let solver_cfg = SolverConfig::new(sched.tau, sched.sigma_sq)?;
        let local = gmsolver::solve(&cm, &self.problem.bounds, &solver_cfg, &mut streams.noise)?;
        let mut y = linalg::sub(local.as_slice(), self.global_model.as_slice());
        for v in &mut y {
            *v *= self.cfg.alpha;
        }
        Ok(y)
    }

    /// First-order baseline route: y_i = grad(x_t, sample) + Gaussian noise.
    fn client_gradient_update(&mut self, i: usize) -> Result<Vec<f64>> {
        let sched = &self.problem.schedule;
        let client = &self.problem.clients[i];
        let streams = &mut self.streams[i];
        let idx = streams.data.random_range(0..client.len());
        let sample = client.get(idx);
        let mut grad = self.problem.loss.gradient(&self.global_model, sample)?;
        if sched.sigma_sq > 0.0 {
            let normal = Normal::new(0.0, sched.sigma_sq.sqrt()).expect("valid std");
            for g in grad.iter_mut() {
                *g += normal.sample(&mut streams.noise);
            }
        }
        Ok(grad)
    }
}

fn audit_or_refuse(cfg: &ExperimentConfig, sched: &Schedule) -> Result<PrivacyLedger> {
    let ledger = privacy::audit_total(&sched.calibration, &cfg.dp);
    if !ledger.valid && !cfg.allow_invalid_ledger {
        return Err(Error::AuditRefused {
            reported: ledger.composed_eps,
            budget: cfg.dp.epsilon,
        });
    }
    Ok(ledger)
}

/// Full training loop for the configured algorithm. Refuses to run when the
/// privacy audit fails, unless the config explicitly allows flagged runs.
/// Zero rounds is a valid degenerate case: no records, no spend.
pub fn run_training(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> Result<TrainingRun> {
    let ledger = audit_or_refuse(cfg, &problem.schedule)?;
    if problem.schedule.t_rounds == 0 {
        let start: Vec<f64> = problem
            .bounds
            .upper()
            .iter()
            .map(|hi| cfg.init_scale * hi)
            .collect();
        return Ok(TrainingRun {
            records: Vec::new(),
            ledger,
            final_model: problem.bounds.project(&ModelVector::new(start)),
            uplink_log: None,
        });
    }
    let mut fed = Federation::new(cfg, problem, seed)?;
    let mut records = Vec::with_capacity(problem.schedule.t_rounds);
    for _ in 0..problem.schedule.t_rounds {
        records.push(fed.run_round()?);
    }
    Ok(TrainingRun {
        records,
        ledger,
        final_model: fed.global_model,
        uplink_log: fed.uplink_log,
    })
}

/// The first-order baseline under the same accounting pipeline. The config
/// must already be set to the baseline algorithm so its schedule (tau = 1,
/// first-order sensitivity) matches the problem.
pub fn run_baseline_fedsgd(
    cfg: &ExperimentConfig,
    problem: &Problem,
    seed: u64,
) -> Result<TrainingRun> {
    if cfg.algorithm != Algorithm::Fedsgd {
        return Err(Error::Config(
            "run_baseline_fedsgd requires algorithm = fedsgd".into(),
        ));
    }
    run_training(cfg, problem, seed)
}
