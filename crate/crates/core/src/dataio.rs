//! Dataset ingestion: LIBSVM-format parsing, synthetic problem generation,
//! normalization, and uniform client partitioning.

use crate::error::{Error, Result};
use crate::model::{ClientDataset, DataSample};
use crate::rng::{global_stream, StreamKind};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::BufRead;

/// A parsed or generated dataset before partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub samples: Vec<DataSample>,
    pub d: usize,
    pub source: String,
}

/// Even random split of sample indices over clients. Remainder samples are
/// dropped, never redistributed, so every client holds exactly the same m.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub per_client_m: usize,
    pub dropped: usize,
    /// client id per sample index; None for dropped samples.
    assignment: Vec<Option<u32>>,
}

impl PartitionPlan {
    pub fn client_of(&self, sample_idx: usize) -> Option<u32> {
        self.assignment.get(sample_idx).copied().flatten()
    }

    pub fn assignment(&self) -> &[Option<u32>] {
        &self.assignment
    }
}

/// Provenance record emitted next to run outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub n: usize,
    pub d: usize,
    pub checksum: String,
}

fn map_label(raw: f64, line_no: usize) -> Result<f64> {
    if raw == 1.0 || raw == -1.0 {
        Ok(raw)
    } else if raw == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::Parse {
            line: line_no,
            message: format!("label must be one of -1, 0, +1; got {raw}"),
        })
    }
}

/// Parse LIBSVM text: per line, a label then `index:value` pairs with
/// 1-based strictly ascending indices. Blank lines and `#` comments are
/// skipped; labels {0,1} or {-1,+1} normalize to {-1,+1}. Features
/// densify to the maximum index seen anywhere in the stream.
pub fn parse_libsvm<R: BufRead>(reader: R, source: &str) -> Result<RawDataset> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_index = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue; // blank or comment-only line
        };
        let raw_label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad label token \"{label_tok}\""),
        })?;
        let label = map_label(raw_label, line_no)?;

        let mut pairs = Vec::new();
        let mut prev_index = 0usize;
        for tok in tokens {
            let (i_str, v_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("bad pair token \"{tok}\""),
            })?;
            let index: usize = i_str.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad index in token \"{tok}\""),
            })?;
            let value: f64 = v_str.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad value in token \"{tok}\""),
            })?;
            if index == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "indices are 1-based; got 0".into(),
                });
            }
            if index <= prev_index {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("indices must be strictly ascending at \"{tok}\""),
                });
            }
            prev_index = index;
            max_index = max_index.max(index);
            pairs.push((index, value));
        }
        rows.push((label, pairs));
    }

    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no samples in input".into(),
        });
    }

    let d = max_index;
    let samples = rows
        .into_iter()
        .map(|(label, pairs)| {
            let mut features = vec![0.0; d];
            for (i, v) in pairs {
                features[i - 1] = v;
            }
            DataSample::new(features, label)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RawDataset {
        samples,
        d,
        source: source.to_string(),
    })
}

/// Inverse of `parse_libsvm` up to zero entries, which are omitted.
pub fn serialize_libsvm(ds: &RawDataset) -> String {
    let mut out = String::new();
    for s in &ds.samples {
        if s.label > 0.0 {
            out.push_str("+1");
        } else {
            out.push_str("-1");
        }
        for (i, v) in s.features.iter().enumerate() {
            if *v != 0.0 {
                out.push_str(&format!(" {}:{}", i + 1, v));
            }
        }
        out.push('\n');
    }
    out
}

/// Desk-scale stand-in for the benchmark workload: a ground-truth weight
/// vector inside the box, features with per-coordinate magnitude at most
/// 1/sqrt(d) (so ||a|| <= 1 with mass spread over coordinates), and labels
/// drawn from the logistic model at temperature `margin`. As margin grows
/// the labels become the deterministic signs of a.w*.
pub fn generate_synthetic(d: usize, n_samples: usize, margin: f64, seed: u64) -> RawDataset {
    let mut rng = global_stream(seed, StreamKind::Global as u32);
    let spread = 1.0 / (d as f64).sqrt();
    let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let truth_norm = crate::linalg::norm(&truth).max(1e-12);

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let features: Vec<f64> = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
        let score = crate::linalg::dot(&features, &truth) / (truth_norm * spread);
        let p_pos = if margin.is_infinite() {
            if score >= 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 / (1.0 + (-margin * score).exp())
        };
        let label = if rng.random::<f64>() < p_pos { 1.0 } else { -1.0 };
        samples.push(DataSample::new(features, label).expect("labels are +-1"));
    }
    RawDataset {
        samples,
        d,
        source: format!("synthetic(d={d}, n={n_samples}, margin={margin}, seed={seed})"),
    }
}

/// Scale all features by a single global factor so that max_j ||a_j|| <= 1.
/// No-op when the data already satisfies the bound.
pub fn normalize_features(ds: &mut RawDataset) {
    let max_norm = ds
        .samples
        .iter()
        .map(|s| crate::linalg::norm(&s.features))
        .fold(0.0f64, f64::max);
    if max_norm > 1.0 {
        let inv = 1.0 / max_norm;
        for s in &mut ds.samples {
            for v in &mut s.features {
                *v *= inv;
            }
        }
    }
}

/// Uniformly random permutation split into n blocks of m = floor(N/n).
pub fn partition(ds: &RawDataset, n: usize, seed: u64) -> Result<PartitionPlan> {
    let total = ds.samples.len();
    if n == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if n > total {
        return Err(Error::Config(format!(
            "cannot split {total} samples over {n} clients"
        )));
    }
    let m = total / n;
    let dropped = total - n * m;

    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = global_stream(seed, StreamKind::Global as u32 + 16);
    for i in (1..total).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut assignment = vec![None; total];
    for (pos, &sample_idx) in order.iter().enumerate() {
        if pos < n * m {
            assignment[sample_idx] = Some((pos / m) as u32);
        }
    }
    Ok(PartitionPlan {
        n_clients: n,
        per_client_m: m,
        dropped,
        assignment,
    })
}

/// Materialize per-client datasets from a plan.
pub fn split_clients(ds: &RawDataset, plan: &PartitionPlan) -> Result<Vec<ClientDataset>> {
    let mut buckets: Vec<Vec<DataSample>> =
        (0..plan.n_clients).map(|_| Vec::with_capacity(plan.per_client_m)).collect();
    for (idx, slot) in plan.assignment.iter().enumerate() {
        if let Some(c) = slot {
            buckets[*c as usize].push(ds.samples[idx].clone());
        }
    }
    buckets.into_iter().map(ClientDataset::new).collect()
}

/// FNV-1a over a canonical byte rendering of the dataset.
fn checksum(ds: &RawDataset) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for s in &ds.samples {
        eat(&s.label.to_le_bytes());
        for v in &s.features {
            eat(&v.to_le_bytes());
        }
    }
    format!("{hash:016x}")
}

pub fn manifest(ds: &RawDataset) -> DatasetManifest {
    DatasetManifest {
        source: ds.source.clone(),
        n: ds.samples.len(),
        d: ds.d,
        checksum: checksum(ds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoxConstraint, LossModel, ModelVector};
    use std::io::Cursor;

    fn parse(text: &str) -> Result<RawDataset> {
        parse_libsvm(Cursor::new(text), "test")
    }

    #[test]
    fn parses_basic_line() {
        let ds = parse("+1 1:0.5 3:-0.25\n").unwrap();
        assert_eq!(ds.d, 3);
        assert_eq!(ds.samples[0].label, 1.0);
        assert_eq!(ds.samples[0].features, vec![0.5, 0.0, -0.25]);
    }

    #[test]
    fn zero_label_maps_to_negative() {
        let ds = parse("0 2:1\n").unwrap();
        assert_eq!(ds.samples[0].label, -1.0);
        assert_eq!(ds.samples[0].features, vec![0.0, 1.0]);
    }

    #[test]
    fn malformed_value_reports_line_and_token() {
        let err = parse("1 1:x\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("1:x"), "{message}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn non_ascending_index_is_error() {
        let err = parse("1 2:1 2:3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("1 3:1 2:3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_and_blank_lines_skip() {
        let ds = parse("# header\n\n+1 1:2\n  # another\n-1 2:4\n").unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.d, 2);
    }

    #[test]
    fn odd_label_rejected() {
        let err = parse("2 1:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn roundtrip_through_serializer() {
        let ds = parse("+1 1:0.5 3:-0.25\n-1 2:4\n").unwrap();
        let text = serialize_libsvm(&ds);
        let back = parse(&text).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.d, ds.d);
    }

    #[test]
    fn synthetic_is_deterministic_and_in_scale() {
        let a = generate_synthetic(8, 100, 4.0, 7);
        let b = generate_synthetic(8, 100, 4.0, 7);
        assert_eq!(a.samples, b.samples);
        for s in &a.samples {
            assert!(crate::linalg::norm(&s.features) <= 1.0 + 1e-12);
            let bound = 1.0 / (8f64).sqrt();
            for v in &s.features {
                assert!(v.abs() <= bound);
            }
        }
    }

    #[test]
    fn synthetic_infinite_margin_is_separable() {
        let ds = generate_synthetic(6, 300, f64::INFINITY, 11);
        // recover w* by refitting the sign rule: all samples must agree with
        // some direction; here we verify consistency by checking that the
        // label function is deterministic given features (regenerate).
        let again = generate_synthetic(6, 300, f64::INFINITY, 11);
        for (a, b) in ds.samples.iter().zip(&again.samples) {
            assert_eq!(a.label, b.label);
        }
        // and a logistic fit on it achieves high accuracy at the truth scale
        let clients = vec![ClientDataset::new(ds.samples.clone()).unwrap()];
        let bx = BoxConstraint::symmetric(6, 0.5, 0.1).unwrap();
        let opt =
            crate::model::reference_optimum(&clients, LossModel::LogisticL2, &bx, 1e-8).unwrap();
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let score = crate::linalg::dot(&s.features, opt.point.as_slice());
                (score >= 0.0) == (s.label > 0.0)
            })
            .count();
        assert!(
            correct as f64 / ds.samples.len() as f64 > 0.9,
            "separable data should be nearly perfectly classified, got {correct}/300"
        );
    }

    /// Empirical scan backing the per-coordinate gradient bound: with box
    /// half-width w and spread features, max_h |grad_h| <= 1/sqrt(d) + w,
    /// so constants configured as L0 = 1 + w sqrt(d) keep the declared
    /// per-coordinate bound honest.
    #[test]
    fn synthetic_respects_per_coordinate_bounds() {
        let d = 16;
        let half_width = 0.05;
        let l0 = 1.0 + half_width * (d as f64).sqrt() + 1e-9;
        let constants =
            crate::model::LossConstants::new(l0, (d as f64).sqrt() + 0.5, 0.1, 1.0, d).unwrap();
        let ds = generate_synthetic(d, 200, 6.0, 3);
        let mut rng = global_stream(21, 5);
        let mut max_coord: f64 = 0.0;
        let mut max_row: f64 = 0.0;
        for _ in 0..1000 {
            let x = ModelVector::new(
                (0..d)
                    .map(|_| rng.random_range(-half_width..half_width))
                    .collect(),
            );
            let s = &ds.samples[rng.random_range(0..ds.samples.len())];
            let g = LossModel::LogisticL2.gradient(&x, s).unwrap();
            for v in g {
                max_coord = max_coord.max(v.abs());
            }
            let h = LossModel::LogisticL2.hessian(&x, s).unwrap();
            for i in 0..d {
                max_row = max_row.max(crate::linalg::norm(h.row(i)));
            }
        }
        assert!(
            max_coord <= constants.per_coord_grad_bound,
            "max coord {max_coord} vs bound {}",
            constants.per_coord_grad_bound
        );
        assert!(
            max_row <= constants.per_row_hess_bound,
            "max row {max_row} vs bound {}",
            constants.per_row_hess_bound
        );
    }

    #[test]
    fn partition_even_split_no_drop() {
        let ds = generate_synthetic(4, 8, 4.0, 1);
        let plan = partition(&ds, 4, 9).unwrap();
        assert_eq!(plan.per_client_m, 2);
        assert_eq!(plan.dropped, 0);
        let mut counts = vec![0usize; 4];
        for slot in plan.assignment() {
            counts[slot.unwrap() as usize] += 1;
        }
        assert_eq!(counts, vec![2, 2, 2, 2]);
    }

    #[test]
    fn partition_reports_remainder() {
        let ds = generate_synthetic(4, 10, 4.0, 1);
        let plan = partition(&ds, 4, 9).unwrap();
        assert_eq!(plan.per_client_m, 2);
        assert_eq!(plan.dropped, 2);
        let dropped = plan.assignment().iter().filter(|s| s.is_none()).count();
        assert_eq!(dropped, 2);
    }

    #[test]
    fn partition_deterministic_under_seed() {
        let ds = generate_synthetic(4, 20, 4.0, 1);
        let a = partition(&ds, 3, 42).unwrap();
        let b = partition(&ds, 3, 42).unwrap();
        assert_eq!(a.assignment(), b.assignment());
        let c = partition(&ds, 3, 43).unwrap();
        assert_ne!(a.assignment(), c.assignment());
    }

    #[test]
    fn partition_more_clients_than_samples_is_error() {
        let ds = generate_synthetic(4, 3, 4.0, 1);
        assert!(partition(&ds, 5, 0).is_err());
    }

    #[test]
    fn split_clients_materializes_plan() {
        let ds = generate_synthetic(4, 9, 4.0, 1);
        let plan = partition(&ds, 2, 5).unwrap();
        let clients = split_clients(&ds, &plan).unwrap();
        assert_eq!(clients.len(), 2);
        assert!(clients.iter().all(|c| c.len() == 4));
    }

    #[test]
    fn normalization_caps_norms() {
        let mut ds = RawDataset {
            samples: vec![
                DataSample::new(vec![3.0, 4.0], 1.0).unwrap(),
                DataSample::new(vec![0.1, 0.0], -1.0).unwrap(),
            ],
            d: 2,
            source: "test".into(),
        };
        normalize_features(&mut ds);
        assert!((crate::linalg::norm(&ds.samples[0].features) - 1.0).abs() < 1e-12);
        // relative geometry preserved
        assert!((ds.samples[1].features[0] - 0.1 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn manifest_checksum_tracks_content() {
        let a = generate_synthetic(4, 10, 4.0, 1);
        let b = generate_synthetic(4, 10, 4.0, 2);
        let ma = manifest(&a);
        let mb = manifest(&b);
        assert_eq!(ma.n, 10);
        assert_eq!(ma.d, 4);
        assert_ne!(ma.checksum, mb.checksum);
        assert_eq!(ma.checksum, manifest(&a).checksum);
    }
}
