//! Reconstruction metrics, token-count statistics and the correlation of
//! expected token counts with image complexity.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{apply_policy, InferencePolicy};
use crate::dataset::{complexity_proxy, Dataset};
use crate::error::{Result, StatError};
use crate::io::{write_atomic, write_csv_atomic};
use crate::model::Tokenizer;

/// PSNR reported for (near-)perfect reconstructions.
pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

/// PSNR in dB of images in `[-1, 1]`, measured on the `[0, 1]` remap.
pub fn psnr(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(StatError::shape("psnr", &[x.len()], &[x_hat.len()]));
    }
    let mse = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        / x.len().max(1) as f64;
    Ok(psnr_from_unit_mse(mse))
}

/// `10 log10(1 / mse)` for an MSE on the `[0, 1]` scale, capped.
pub fn psnr_from_unit_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Least-squares fit `y = slope * x + intercept` with Pearson correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson: f64,
    /// Either variable has (near-)zero variance; `pearson` is then 0.
    pub degenerate: bool,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len().min(y.len()).max(1) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (vx, vy) = (sxx / n, syy / n);
    let degenerate = vx < 1e-12 || vy < 1e-12;
    let slope = if vx < 1e-12 { 0.0 } else { sxy / sxx };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        pearson: if degenerate {
            0.0
        } else {
            (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
        },
        degenerate,
    }
}

/// `sum_i max(0, p_i - p_{i-1})` of one profile.
pub fn upward_mass(p_row: &[f32]) -> f64 {
    p_row
        .windows(2)
        .map(|w| (w[1] as f64 - w[0] as f64).max(0.0))
        .sum()
}

/// Per-image evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEval {
    pub id: u64,
    pub label: usize,
    pub proxy_bytes: f64,
    /// Expected token count `sum p`.
    pub t: f64,
    /// Tokens kept by the evaluated policy.
    pub k: usize,
    pub mse: f64,
    pub psnr: f64,
    pub p: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub num_samples: usize,
    pub latent_len: usize,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_tokens: f64,
    /// Count of images per kept-token count `0..=L`.
    pub token_count_histogram: Vec<usize>,
    pub mean_expected_tokens: f64,
    pub pearson_tokens_vs_proxy: f64,
    pub regression_slope: f64,
    pub regression_intercept: f64,
    pub variance_degenerate: bool,
    /// Mean over images of the upward-step mass divided by `L`.
    pub mean_upward_violation: f64,
    /// Mean over images of the unnormalised upward-step mass.
    pub mean_upward_mass: f64,
    /// Mean `T` per proxy quartile, easiest first.
    pub quartile_mean_tokens: [f64; 4],
    /// Spread `max T - min T` over images.
    pub expected_tokens_spread: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Runs `tok` over `data` under `policy` and collects per-image records.
pub fn evaluate_samples(
    tok: &Tokenizer,
    data: &Dataset,
    policy: InferencePolicy,
    batch_size: usize,
) -> Result<Vec<SampleEval>> {
    policy.validate(tok.config.latent_len)?;
    let (h, w) = (data.height, data.width);
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    let per_chunk: Vec<Result<Vec<SampleEval>>> = chunks
        .par_iter()
        .map(|idx| {
            let batch = data.batch(idx);
            let a = tok.analyze(&batch.pixels)?;
            let mask = apply_policy(&a.p, a.batch, a.latent_len, policy);
            let x_hat = tok.decode_codes(&a.indices, &mask)?;
            let n = 3 * h * w;
            let mut out = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let s = &data.samples[i];
                let x = &batch.pixels.data()[j * n..(j + 1) * n];
                let y = &x_hat.data()[j * n..(j + 1) * n];
                let mse = x
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    / n as f64;
                out.push(SampleEval {
                    id: s.id,
                    label: s.label,
                    proxy_bytes: complexity_proxy(&s.pixels, h, w).0,
                    t: a.expected_tokens(j),
                    k: mask.kept(j),
                    mse,
                    psnr: psnr(x, y)?,
                    p: a.p_row(j).to_vec(),
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(data.len());
    for c in per_chunk {
        all.extend(c?);
    }
    Ok(all)
}

/// Aggregates per-image records into a report.
pub fn summarize(
    samples: &[SampleEval],
    latent_len: usize,
    policy: InferencePolicy,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(StatError::InvalidArgument("no samples to evaluate".into()));
    }
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SampleEval) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let mut hist = vec![0usize; latent_len + 1];
    for s in samples {
        hist[s.k.min(latent_len)] += 1;
    }
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let proxy: Vec<f64> = samples.iter().map(|s| s.proxy_bytes).collect();
    let fit = linear_fit(&proxy, &t);
    let upward = mean(&|s| upward_mass(&s.p));
    let t_max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_min = t.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        policy: policy.to_string(),
        num_samples: samples.len(),
        latent_len,
        mean_mse: mean(&|s| s.mse),
        mean_psnr_db: mean(&|s| s.psnr),
        mean_tokens: mean(&|s| s.k as f64),
        token_count_histogram: hist,
        mean_expected_tokens: mean(&|s| s.t),
        pearson_tokens_vs_proxy: fit.pearson,
        regression_slope: fit.slope,
        regression_intercept: fit.intercept,
        variance_degenerate: fit.degenerate,
        mean_upward_violation: upward / latent_len as f64,
        mean_upward_mass: upward,
        quartile_mean_tokens: quartile_means(&proxy, &t),
        expected_tokens_spread: t_max - t_min,
    })
}

/// Mean of `values` within each quartile of `keys` (stable order, so ties
/// at the boundaries go to the lower index first).
pub fn quartile_means(keys: &[f64], values: &[f64]) -> [f64; 4] {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let n = order.len();
    let mut out = [0.0; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let (lo, hi) = (q * n / 4, (q + 1) * n / 4);
        if hi > lo {
            *slot = order[lo..hi].iter().map(|&i| values[i]).sum::<f64>() / (hi - lo) as f64;
        }
    }
    out
}

/// Per-image analysis plus aggregate report for one policy.
pub fn token_complexity_analysis(
    tok: &Tokenizer,
    data: &Dataset,
    policy: InferencePolicy,
) -> Result<(EvalReport, Vec<SampleEval>)> {
    let samples = evaluate_samples(tok, data, policy, 64)?;
    let report = summarize(&samples, tok.config.latent_len, policy)?;
    Ok((report, samples))
}

/// `id,label,proxy_bytes,T,k_threshold,mse,psnr`
pub fn write_samples_csv(samples: &[SampleEval], path: &Path) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record([
            "id",
            "label",
            "proxy_bytes",
            "T",
            "k_threshold",
            "mse",
            "psnr",
        ])?;
        for s in samples {
            w.write_record([
                s.id.to_string(),
                s.label.to_string(),
                s.proxy_bytes.to_string(),
                s.t.to_string(),
                s.k.to_string(),
                s.mse.to_string(),
                s.psnr.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `id,p_0,...,p_{L-1}`
pub fn write_profiles_csv(ids: &[u64], p: &[f32], latent_len: usize, path: &Path) -> Result<()> {
    write_csv_atomic(path, |w| {
        let mut header = vec!["id".to_string()];
        header.extend((0..latent_len).map(|i| format!("p_{i}")));
        w.write_record(&header)?;
        for (id, row) in ids.iter().zip(p.chunks(latent_len.max(1))) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Tokenizer-side ablation variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// The learned keep profile under the given policy.
    Stat(InferencePolicy),
    /// A fixed prefix whose length is the STAT run's rounded mean `T`.
    FixCount,
    /// Per-image prefix of `round(sum p)` tokens.
    HardDrop,
    /// The single threshold an AR model trained with `ar.fixed_tau` sees.
    FixThreshold(f64),
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Stat(_) => "stat",
            Variant::FixCount => "fixcount",
            Variant::HardDrop => "harddrop",
            Variant::FixThreshold(_) => "fixthreshold",
        }
    }
}

/// Evaluates `variant` on `data`. `FixCount` first measures the mean
/// expected token count of the model on the same data.
pub fn run_variant(tok: &Tokenizer, data: &Dataset, variant: Variant) -> Result<EvalReport> {
    let policy = match variant {
        Variant::Stat(p) => p,
        Variant::HardDrop => InferencePolicy::ExpectedCount(0),
        Variant::FixThreshold(t) => InferencePolicy::Threshold(t),
        Variant::FixCount => {
            let mut total = 0.0;
            for b in data.sequential_batches(64) {
                let a = tok.analyze(&b.pixels)?;
                total += (0..a.batch).map(|j| a.expected_tokens(j)).sum::<f64>();
            }
            let mean_t = total / data.len().max(1) as f64;
            let k = (mean_t.round() as usize).clamp(1, tok.config.latent_len);
            InferencePolicy::FixedCount(k)
        }
    };
    Ok(token_complexity_analysis(tok, data, policy)?.0)
}

/// `variant,policy,mean_tokens,mean_mse,mean_psnr_db,pearson_tokens_vs_proxy`
pub fn write_comparison_csv(rows: &[(String, EvalReport)], path: &Path) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record([
            "variant",
            "policy",
            "mean_tokens",
            "mean_mse",
            "mean_psnr_db",
            "pearson_tokens_vs_proxy",
        ])?;
        for (name, r) in rows {
            w.write_record([
                name.clone(),
                r.policy.clone(),
                r.mean_tokens.to_string(),
                r.mean_mse.to_string(),
                r.mean_psnr_db.to_string(),
                r.pearson_tokens_vs_proxy.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let x = vec![0.2f32; 12];
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        // 0.1 on the [0, 1] scale is 0.2 on [-1, 1]
        let y: Vec<f32> = x.iter().map(|v| v + 0.2).collect();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.3] {
            let y: Vec<f32> = x
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { amp } else { -amp })
                .collect();
            let p = psnr(&x, &y).unwrap();
            assert!(p < last);
            last = p;
        }
        assert!(psnr(&x, &x[..3]).is_err());
    }

    #[test]
    fn exact_linear_fit() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 3.7 + 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.44 * v + 167.6).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope - 0.44).abs() < 1e-6);
        assert!((f.intercept - 167.6).abs() < 1e-6);
        assert!((f.pearson - 1.0).abs() < 1e-12);
        assert!(!f.degenerate);
    }

    #[test]
    fn identical_inputs_are_degenerate() {
        let f = linear_fit(&[5.0; 10], &[3.0; 10]);
        assert!(f.degenerate);
        assert_eq!(f.pearson, 0.0);
    }

    #[test]
    fn quartiles_use_stable_order() {
        let keys = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0];
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(quartile_means(&keys, &vals), [1.5, 3.5, 5.5, 7.5]);
    }

    #[test]
    fn upward_mass_examples() {
        assert!((upward_mass(&[0.2, 0.5, 0.4, 0.9]) - 0.8).abs() < 1e-6);
        assert_eq!(upward_mass(&[0.9, 0.7, 0.7, 0.2]), 0.0);
    }
}
