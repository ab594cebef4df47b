//! Experiment runner: dataset preparation, multi-seed sweeps, metric tables,
//! and file emission (CSV, manifest, plot script).

use crate::config::{DatasetSpec, ExperimentConfig, Schedule};
use crate::dataio::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::fedcore::{self, Problem};
use crate::model::{self, BoxConstraint, LossModel};
use crate::privacy;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One CSV row. Column set is stable:
/// algorithm, eps, k_over_d, seed, round, subopt, test_acc, uplink_bytes,
/// eps_spent, delta_spent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub algorithm: String,
    pub eps: f64,
    pub k_over_d: f64,
    pub seed: u64,
    pub round: usize,
    pub subopt: f64,
    pub test_acc: f64,
    pub uplink_bytes: usize,
    pub eps_spent: f64,
    pub delta_spent: f64,
}

/// All rows of a sweep, ordered by (seed run, round), plus a failure marker
/// when a seed aborted mid-run.
#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub failure: Option<String>,
}

/// Everything emitted next to the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub schedule: Schedule,
    pub dataset: DatasetManifest,
    pub ledger: serde_json::Value,
    pub composed_eps: f64,
    pub composed_delta: f64,
    pub ledger_valid: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub manifest: RunManifest,
    pub uplink_log: Option<Vec<u8>>,
}

/// Derive the run schedule without training or the reference solve: loads
/// just enough of the dataset to know (m, d). Backs `audit` and `derive`.
pub fn derive_only(cfg: &ExperimentConfig) -> Result<Schedule> {
    cfg.validate()?;
    let (m, d) = match &cfg.dataset {
        DatasetSpec::Synthetic { d, n_samples, .. } => {
            if cfg.n > *n_samples {
                return Err(Error::Config(format!(
                    "cannot split {n_samples} samples over {} clients",
                    cfg.n
                )));
            }
            (n_samples / cfg.n, *d)
        }
        DatasetSpec::Libsvm { path, .. } => {
            let file = fs::File::open(path)?;
            let ds = dataio::parse_libsvm(
                std::io::BufReader::new(file),
                &path.display().to_string(),
            )?;
            if cfg.n > ds.samples.len() {
                return Err(Error::Config(format!(
                    "cannot split {} samples over {} clients",
                    ds.samples.len(),
                    cfg.n
                )));
            }
            (ds.samples.len() / cfg.n, ds.d)
        }
    };
    if cfg.k > d {
        return Err(Error::Config(format!("k={} exceeds data dimension {d}", cfg.k)));
    }
    if cfg.rounds(m) == 0 {
        return Ok(Schedule::zero_rounds(cfg, m, d));
    }
    crate::config::derive_schedule(cfg, m, d)
}

/// Load or generate the dataset, partition it, derive the schedule, and
/// compute the reference optimum the suboptimality curves are anchored to.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Problem, DatasetManifest)> {
    cfg.validate()?;
    let (raw, data_seed) = match &cfg.dataset {
        DatasetSpec::Synthetic {
            d,
            n_samples,
            margin,
            seed,
        } => (dataio::generate_synthetic(*d, *n_samples, *margin, *seed), *seed),
        DatasetSpec::Libsvm { path, normalize } => {
            let file = fs::File::open(path)?;
            let mut ds = dataio::parse_libsvm(
                std::io::BufReader::new(file),
                &path.display().to_string(),
            )?;
            if *normalize {
                dataio::normalize_features(&mut ds);
            }
            (ds, 0)
        }
    };
    let manifest = dataio::manifest(&raw);
    let d = raw.d;
    if cfg.k > d {
        return Err(Error::Config(format!("k={} exceeds data dimension {d}", cfg.k)));
    }

    let plan = dataio::partition(&raw, cfg.n, data_seed)?;
    let clients = dataio::split_clients(&raw, &plan)?;
    let m = plan.per_client_m;

    let rounds = cfg.rounds(m);
    let schedule = if rounds == 0 {
        Schedule::zero_rounds(cfg, m, d)
    } else {
        crate::config::derive_schedule(cfg, m, d)?
    };

    let bounds = BoxConstraint::symmetric(d, cfg.box_half_width, cfg.constants.diameter)?;
    let loss = LossModel::LogisticL2;
    let reference = model::reference_optimum(&clients, loss, &bounds, cfg.ref_tol)?;

    Ok((
        Problem {
            clients,
            eval_samples: raw.samples,
            loss,
            bounds,
            schedule,
            ref_value: reference.value,
        },
        manifest,
    ))
}

/// Run every seed in the config and assemble the table. Refuses up front
/// when the audit fails and flagged runs are not allowed; a seed failing
/// mid-sweep leaves partial rows plus a failure marker.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (problem, dataset_manifest) = prepare(cfg)?;
    run_experiment_on(cfg, &problem, dataset_manifest)
}

/// Same as `run_experiment` for a problem prepared ahead of time (shared
/// across configs in sweeps and tests).
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    problem: &Problem,
    dataset_manifest: DatasetManifest,
) -> Result<ExperimentOutput> {
    let ledger = privacy::audit_total(&problem.schedule.calibration, &cfg.dp);
    if !ledger.valid && !cfg.allow_invalid_ledger {
        return Err(Error::AuditRefused {
            reported: ledger.composed_eps,
            budget: cfg.dp.epsilon,
        });
    }

    let k_over_d = cfg.k as f64 / problem.bounds.dim() as f64;
    let mut table = MetricsTable::default();
    let mut uplink_log: Option<Vec<u8>> = None;
    for &seed in &cfg.seeds {
        match fedcore::run_training(cfg, problem, seed) {
            Ok(run) => {
                for r in &run.records {
                    table.rows.push(MetricsRow {
                        algorithm: cfg.algorithm.name().to_string(),
                        eps: cfg.dp.epsilon,
                        k_over_d,
                        seed,
                        round: r.round,
                        subopt: r.suboptimality,
                        test_acc: r.test_accuracy,
                        uplink_bytes: r.uplink_bytes,
                        eps_spent: r.eps_spent,
                        delta_spent: r.delta_spent,
                    });
                }
                if let Some(log) = run.uplink_log {
                    uplink_log.get_or_insert_with(Vec::new).extend_from_slice(&log);
                }
            }
            Err(e) => {
                table.failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }

    let manifest = RunManifest {
        config: cfg.clone(),
        schedule: problem.schedule.clone(),
        dataset: dataset_manifest,
        ledger: ledger.export_json(&problem.schedule.calibration),
        composed_eps: ledger.composed_eps,
        composed_delta: ledger.composed_delta,
        ledger_valid: ledger.valid,
        failure: table.failure.clone(),
    };
    Ok(ExperimentOutput {
        table,
        manifest,
        uplink_log,
    })
}

pub const CSV_HEADER: &str =
    "algorithm,eps,k_over_d,seed,round,subopt,test_acc,uplink_bytes,eps_spent,delta_spent";

pub fn render_csv(table: &MetricsTable) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.algorithm,
            r.eps,
            r.k_over_d,
            r.seed,
            r.round,
            r.subopt,
            r.test_acc,
            r.uplink_bytes,
            r.eps_spent,
            r.delta_spent
        ));
    }
    out
}

/// Parse a metrics CSV back into rows. Exact inverse of `render_csv` since
/// float formatting round-trips.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 0,
        message: "empty CSV".into(),
    })?;
    if header != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header \"{header}\""),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("bad number \"{s}\""),
            })
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("bad integer \"{s}\""),
            })
        };
        rows.push(MetricsRow {
            algorithm: fields[0].to_string(),
            eps: parse_f(fields[1])?,
            k_over_d: parse_f(fields[2])?,
            seed: parse_u(fields[3])?,
            round: parse_u(fields[4])? as usize,
            subopt: parse_f(fields[5])?,
            test_acc: parse_f(fields[6])?,
            uplink_bytes: parse_u(fields[7])? as usize,
            eps_spent: parse_f(fields[8])?,
            delta_spent: parse_f(fields[9])?,
        });
    }
    Ok(rows)
}

/// Per-round mean and standard deviation across seeds.
pub fn aggregate_rounds(table: &MetricsTable) -> Vec<(usize, f64, f64, f64, f64)> {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        buckets.entry(r.round).or_default().push((r.subopt, r.test_acc));
    }
    buckets
        .into_iter()
        .map(|(round, vals)| {
            let n = vals.len() as f64;
            let (ms, ma) = vals
                .iter()
                .fold((0.0, 0.0), |(a, b), (s, t)| (a + s / n, b + t / n));
            let (vs, va) = vals.iter().fold((0.0, 0.0), |(a, b), (s, t)| {
                (a + (s - ms) * (s - ms) / n, b + (t - ma) * (t - ma) / n)
            });
            (round, ms, vs.sqrt(), ma, va.sqrt())
        })
        .collect()
}

fn render_plot_script(table: &MetricsTable) -> String {
    let mut out = String::new();
    out.push_str("# Suboptimality and accuracy versus round, mean with one-std band.\n");
    out.push_str("# Usage: gnuplot plot.gp  (writes suboptimality.png, accuracy.png)\n");
    out.push_str("$agg << EOD\n");
    out.push_str("# round subopt_mean subopt_std acc_mean acc_std\n");
    for (round, sm, ss, am, astd) in aggregate_rounds(table) {
        out.push_str(&format!("{round} {sm} {ss} {am} {astd}\n"));
    }
    out.push_str("EOD\n\n");
    out.push_str("set terminal pngcairo size 960,600\n");
    out.push_str("set grid\n");
    out.push_str("set xlabel 'round'\n\n");
    out.push_str("set output 'suboptimality.png'\n");
    out.push_str("set ylabel 'f(x_t) - f(x*)'\n");
    out.push_str(
        "plot $agg using 1:($2-$3):($2+$3) with filledcurves fc rgb '#d0d0f8' title 'mean +- std', \\\n",
    );
    out.push_str("     $agg using 1:2 with lines lw 2 lc rgb '#3030c0' title 'suboptimality'\n\n");
    out.push_str("set output 'accuracy.png'\n");
    out.push_str("set ylabel 'test accuracy'\n");
    out.push_str("set yrange [0:1]\n");
    out.push_str(
        "plot $agg using 1:($4-$5):($4+$5) with filledcurves fc rgb '#d0f8d0' title 'mean +- std', \\\n",
    );
    out.push_str("     $agg using 1:4 with lines lw 2 lc rgb '#30a030' title 'accuracy'\n");
    out
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let tmp = dir.join(format!("{name}.tmp"));
    let target = dir.join(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

/// Write metrics.csv, manifest.json, and plot.gp (plus uplink.bin when a
/// replay log was captured). Files land via temp-and-rename so a failed
/// emission never leaves a partially written target.
pub fn emit_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    written.push(write_atomic(dir, "metrics.csv", render_csv(&output.table).as_bytes())?);
    let manifest_text = serde_json::to_string_pretty(&output.manifest)?;
    written.push(write_atomic(dir, "manifest.json", manifest_text.as_bytes())?);
    written.push(write_atomic(
        dir,
        "plot.gp",
        render_plot_script(&output.table).as_bytes(),
    )?);
    if let Some(log) = &output.uplink_log {
        written.push(write_atomic(dir, "uplink.bin", log)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Algorithm, Constants, DatasetSpec};
    use crate::privacy::DpParams;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                d: 6,
                n_samples: 120,
                margin: 4.0,
                seed: 3,
            },
            n: 4,
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
                epsilon: 0.8,
                delta0: 0.01,
                delta_hat: 0.01,
            },
            algorithm: Algorithm::Dpfcrn,
            t_rounds: Some(12),
            epochs: None,
            seeds: vec![1, 2],
            output_dir: None,
            tau_max: 1_000_000,
            fedsgd_lr: 1.0,
            ref_tol: 1e-8,
            init_scale: 0.0,
            allow_invalid_ledger: true,
            log_uplinks: false,
        }
    }

    #[test]
    fn experiment_rows_ordered_and_complete() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.table.failure.is_none());
        assert_eq!(out.table.rows.len(), 2 * 12);
        for (i, r) in out.table.rows.iter().enumerate() {
            assert_eq!(r.round, i % 12);
            assert_eq!(r.seed, if i < 12 { 1 } else { 2 });
            assert_eq!(r.algorithm, "dpfcrn");
        }
    }

    #[test]
    fn duplicate_seeds_give_identical_rows() {
        let mut cfg = small_cfg();
        cfg.seeds = vec![1, 1];
        let out = run_experiment(&cfg).unwrap();
        let first: Vec<_> = out.table.rows[..12].to_vec();
        let second: Vec<_> = out.table.rows[12..].to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.subopt, b.subopt);
            assert_eq!(a.test_acc, b.test_acc);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg).unwrap();
        let text = render_csv(&out.table);
        let rows = parse_csv(&text).unwrap();
        assert_eq!(rows, out.table.rows);
    }

    #[test]
    fn emission_writes_exactly_three_files() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("dpfcrn-emit-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let files = emit_outputs(&out, &dir).unwrap();
        assert_eq!(files.len(), 3);
        let listed: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(listed.len(), 3);
        for name in ["metrics.csv", "manifest.json", "plot.gp"] {
            assert!(listed.iter().any(|f| f == name), "missing {name}");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(
            manifest["composed_eps"].as_f64().unwrap(),
            out.manifest.composed_eps
        );
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn refusal_when_ledger_invalid_and_not_allowed() {
        let mut cfg = small_cfg();
        // single-step baseline with a large m: the per-step epsilon blows
        // past the regime the composition is sound for, the audited total
        // exceeds the 0.8 target, and the run must refuse
        cfg.algorithm = Algorithm::Fedsgd;
        cfg.allow_invalid_ledger = false;
        cfg.dataset = DatasetSpec::Synthetic {
            d: 6,
            n_samples: 2400,
            margin: 4.0,
            seed: 3,
        };
        cfg.t_rounds = Some(400);
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::AuditRefused { .. }), "{err}");
    }

    #[test]
    fn uplink_log_replays_as_valid_records() {
        let mut cfg = small_cfg();
        cfg.log_uplinks = true;
        cfg.seeds = vec![1];
        cfg.t_rounds = Some(5);
        let out = run_experiment(&cfg).unwrap();
        let log = out.uplink_log.clone().expect("log requested");
        let mut offset = 0;
        let mut count = 0;
        while offset < log.len() {
            let (u, used) = crate::sparsify::SparseUpdate::from_bytes(&log[offset..], 6).unwrap();
            assert_eq!(u.mask.k(), 2);
            assert!((u.client_id as usize) < 4);
            offset += used;
            count += 1;
        }
        assert_eq!(count, 4 * 5); // n clients x rounds

        let dir = std::env::temp_dir().join(format!("dpfcrn-log-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let files = emit_outputs(&out, &dir).unwrap();
        assert_eq!(files.len(), 4);
        assert!(dir.join("uplink.bin").exists());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn seed_failure_leaves_partial_rows_and_marker() {
        let cfg = small_cfg();
        let (problem, manifest) = prepare(&cfg).unwrap();
        // a problem whose client count disagrees with the config fails at
        // federation setup for every seed; the table must carry the marker
        let mut broken = problem.clone();
        broken.clients.pop();
        let out = run_experiment_on(&cfg, &broken, manifest).unwrap();
        assert!(out.table.rows.is_empty());
        let marker = out.table.failure.expect("marker set");
        assert!(marker.contains("seed 1"), "{marker}");
        assert_eq!(out.manifest.failure.as_deref(), Some(marker.as_str()));
    }

    #[test]
    fn aggregation_has_one_bucket_per_round() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg).unwrap();
        let agg = aggregate_rounds(&out.table);
        assert_eq!(agg.len(), 12);
        // two distinct seeds on a noisy run: the spread is strictly positive
        assert!(agg.iter().any(|(_, _, ss, _, _)| *ss > 0.0));

        // identical seeds: zero spread everywhere
        let mut same = cfg.clone();
        same.seeds = vec![3, 3];
        let out = run_experiment(&same).unwrap();
        for (_, _, ss, _, astd) in aggregate_rounds(&out.table) {
            assert_eq!(ss, 0.0);
            assert_eq!(astd, 0.0);
        }
    }
}
