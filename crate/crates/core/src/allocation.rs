//! Token-dropping policies: training-time hard tails and Bernoulli gates,
//! inference-time threshold / expected-count / fixed-count truncation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Result, StatError};

/// Binary keep mask, `rows x len`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMask {
    rows: usize,
    len: usize,
    bits: Vec<u8>,
}

impl DropMask {
    pub fn from_bits(rows: usize, len: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * len || bits.iter().any(|&b| b > 1) {
            return Err(StatError::InvalidArgument(format!(
                "mask needs {rows}x{len} binary entries, got {}",
                bits.len()
            )));
        }
        Ok(DropMask { rows, len, bits })
    }

    /// Every row keeps exactly its first `k[j]` positions.
    pub fn prefixes(len: usize, ks: &[usize]) -> Self {
        let mut bits = vec![0u8; ks.len() * len];
        for (row, &k) in bits.chunks_mut(len.max(1)).zip(ks) {
            row[..k.min(len)].fill(1);
        }
        DropMask {
            rows: ks.len(),
            len,
            bits,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.bits[j * self.len..(j + 1) * self.len]
    }

    pub fn kept(&self, j: usize) -> usize {
        self.row(j).iter().map(|&b| b as usize).sum()
    }

    /// True when row `j` is ones followed by zeros.
    pub fn is_prefix(&self, j: usize) -> bool {
        self.row(j).windows(2).all(|w| w[0] >= w[1])
    }

    /// `[rows, len]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        Tensor::new([self.rows, self.len], data).expect("mask shape")
    }
}

/// Draws `K ~ U{l_min, ..., l_max}` and returns `(K, prefix mask of length K)`.
pub fn sample_hard_tail<R: Rng>(
    rng: &mut R,
    l_min: usize,
    l_max: usize,
    len: usize,
) -> Result<(usize, DropMask)> {
    if l_min < 1 || l_min > l_max || l_max > len {
        return Err(StatError::InvalidArgument(format!(
            "hard tail bounds need 1 <= l_min <= l_max <= L, got {l_min}, {l_max}, {len}"
        )));
    }
    let k = rng.gen_range(l_min..=l_max);
    Ok((k, DropMask::prefixes(len, &[k])))
}

/// Independent `m = 1[u < p]` with `u ~ U[0, 1)` per entry of `p [rows, len]`.
pub fn sample_bernoulli_gate<R: Rng>(p: &[f32], rows: usize, len: usize, rng: &mut R) -> DropMask {
    assert_eq!(p.len(), rows * len, "profile size");
    let bits = p.iter().map(|&pi| (rng.gen::<f32>() < pi) as u8).collect();
    DropMask { rows, len, bits }
}

/// Inference-time truncation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferencePolicy {
    /// Keep every token with `p >= tau`, and at least the first token.
    Threshold(f64),
    /// Keep a prefix of `round(sum p) + extra` tokens, clamped to `[1, L]`.
    ExpectedCount(i64),
    /// Keep the first `K` tokens of every image.
    FixedCount(usize),
}

impl InferencePolicy {
    pub fn validate(&self, len: usize) -> Result<()> {
        let ok = match *self {
            InferencePolicy::Threshold(t) => t > 0.0 && t < 1.0,
            InferencePolicy::ExpectedCount(x) => x.unsigned_abs() as usize <= len,
            InferencePolicy::FixedCount(k) => (1..=len).contains(&k),
        };
        if ok {
            Ok(())
        } else {
            Err(StatError::InvalidArgument(format!(
                "policy {self} is out of range for L={len}"
            )))
        }
    }
}

impl fmt::Display for InferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            InferencePolicy::Threshold(t) => write!(f, "threshold:{t}"),
            InferencePolicy::ExpectedCount(x) => write!(f, "expected:{x:+}"),
            InferencePolicy::FixedCount(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for InferencePolicy {
    type Err = StatError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            StatError::InvalidArgument(format!(
                "cannot parse policy `{s}` (expected threshold:T, expected:+X or fixed:K)"
            ))
        };
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let policy = match kind {
            "threshold" => {
                let t: f64 = arg.parse().map_err(|_| bad())?;
                if !(t > 0.0 && t < 1.0) {
                    return Err(bad());
                }
                InferencePolicy::Threshold(t)
            }
            "expected" => InferencePolicy::ExpectedCount(arg.parse().map_err(|_| bad())?),
            "fixed" => {
                let k: usize = arg.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                InferencePolicy::FixedCount(k)
            }
            _ => return Err(bad()),
        };
        Ok(policy)
    }
}

/// Applies `policy` to every row of `p [rows, len]`.
pub fn apply_policy(p: &[f32], rows: usize, len: usize, policy: InferencePolicy) -> DropMask {
    assert_eq!(p.len(), rows * len, "profile size");
    match policy {
        InferencePolicy::Threshold(tau) => {
            let mut bits: Vec<u8> = p.iter().map(|&pi| (pi as f64 >= tau) as u8).collect();
            for row in bits.chunks_mut(len.max(1)) {
                if row.iter().all(|&b| b == 0) {
                    row[0] = 1;
                }
            }
            DropMask { rows, len, bits }
        }
        InferencePolicy::ExpectedCount(extra) => {
            let ks: Vec<usize> = p
                .chunks(len.max(1))
                .take(rows)
                .map(|row| expected_count(row, extra))
                .collect();
            DropMask::prefixes(len, &ks)
        }
        InferencePolicy::FixedCount(k) => DropMask::prefixes(len, &vec![k.min(len); rows]),
    }
}

/// `clamp(round(sum p) + extra, 1, L)` for one profile.
pub fn expected_count(p_row: &[f32], extra: i64) -> usize {
    let t: f64 = p_row.iter().map(|&v| v as f64).sum();
    let k = t.round() as i64 + extra;
    k.clamp(1, p_row.len().max(1) as i64) as usize
}

/// `min { i | p_i < tau }`, clamped to at least 1; `L` when no entry is below `tau`.
pub fn eos_position(p_row: &[f32], tau: f64) -> usize {
    match p_row.iter().position(|&v| (v as f64) < tau) {
        Some(i) => i.max(1),
        None => p_row.len(),
    }
}
