//! Random-k sparsification for uplink messages.
//!
//! A mask of k distinct coordinates is drawn uniformly over all C(d, k)
//! subsets, the selected entries are scaled by d/k so the operator is
//! unbiased, and only (index, value) pairs go on the wire. One mask per
//! client per communication round, sampled at upload time and never reused.

use crate::error::{Error, Result};
use rand::Rng;

/// Sorted set of k distinct coordinate indices in [0, d).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinateMask {
    selected: Vec<usize>,
    d: usize,
}

impl CoordinateMask {
    pub fn new(mut selected: Vec<usize>, d: usize) -> Result<Self> {
        selected.sort_unstable();
        let k = selected.len();
        if k == 0 || k > d {
            return Err(Error::Config(format!("mask size {k} out of range [1, {d}]")));
        }
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("mask indices must be distinct".into()));
        }
        if *selected.last().unwrap() >= d {
            return Err(Error::Config("mask index out of range".into()));
        }
        Ok(Self { selected, d })
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn indices(&self) -> &[usize] {
        &self.selected
    }
}

/// A k-of-d masked, scaled uplink message.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub mask: CoordinateMask,
    /// Selected entries with the d/k factor already applied.
    pub values: Vec<f64>,
    pub round: u32,
    pub client_id: u32,
}

/// Draw a uniformly random k-subset of [0, d) via a partial Fisher-Yates
/// shuffle. Deterministic given the generator state.
pub fn sample_mask<R: Rng>(d: usize, k: usize, rng: &mut R) -> Result<CoordinateMask> {
    if k == 0 || k > d {
        return Err(Error::Config(format!(
            "sparsification parameter k={k} out of range [1, {d}]"
        )));
    }
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        pool.swap(i, j);
    }
    let selected = pool[..k].to_vec();
    CoordinateMask::new(selected, d)
}

/// S(x): keep the masked coordinates of x, scaled by d/k.
pub fn apply(x: &[f64], mask: &CoordinateMask, round: u32, client_id: u32) -> Result<SparseUpdate> {
    if x.len() != mask.dim() {
        return Err(Error::Dimension {
            expected: mask.dim(),
            got: x.len(),
        });
    }
    let factor = mask.dim() as f64 / mask.k() as f64;
    let values = mask.indices().iter().map(|&i| factor * x[i]).collect();
    Ok(SparseUpdate {
        mask: mask.clone(),
        values,
        round,
        client_id,
    })
}

/// Dense d-vector with the update's values at masked positions.
pub fn expand(u: &SparseUpdate) -> Vec<f64> {
    let mut out = vec![0.0; u.mask.dim()];
    for (&i, &v) in u.mask.indices().iter().zip(&u.values) {
        out[i] = v;
    }
    out
}

/// All C(d, k) masks in lexicographic order. Test and audit support; only
/// sensible for small d.
pub fn all_masks(d: usize, k: usize) -> Vec<CoordinateMask> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, d: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<CoordinateMask>) {
        if current.len() == k {
            out.push(CoordinateMask::new(current.clone(), d).unwrap());
            return;
        }
        for i in start..d {
            current.push(i);
            rec(i + 1, d, k, current, out);
            current.pop();
        }
    }
    rec(0, d, k, &mut current, &mut out);
    out
}

/// Serialized size in bytes of an update carrying k values.
pub fn wire_size(k: usize) -> usize {
    12 + 12 * k
}

impl SparseUpdate {
    /// Little-endian wire form:
    /// (client_id: u32, round: u32, k: u32, then k x (index: u32, value: f64)).
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.mask.k();
        let mut buf = Vec::with_capacity(wire_size(k));
        buf.extend_from_slice(&self.client_id.to_le_bytes());
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        for (&i, &v) in self.mask.indices().iter().zip(&self.values) {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Parse one update from the head of `bytes`; returns it with the number
    /// of bytes consumed. `d` is the model dimension the indices must fit.
    pub fn from_bytes(bytes: &[u8], d: usize) -> Result<(Self, usize)> {
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Config(format!(
                    "truncated update record: need {n} bytes, have {}",
                    bytes.len()
                )))
            } else {
                Ok(())
            }
        };
        need(12)?;
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let client_id = u32_at(0);
        let round = u32_at(4);
        let k = u32_at(8) as usize;
        let total = wire_size(k);
        need(total)?;
        let mut indices = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for slot in 0..k {
            let off = 12 + 12 * slot;
            indices.push(u32_at(off) as usize);
            values.push(f64::from_le_bytes(bytes[off + 4..off + 12].try_into().unwrap()));
        }
        let mask = CoordinateMask::new(indices, d)?;
        Ok((
            Self {
                mask,
                values,
                round,
                client_id,
            },
            total,
        ))
    }
}
