//! Training objectives: reconstruction, VQ terms and the three keep-profile
//! priors (content correlation, decreasing importance, KL sparsity).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Result, StatError};

/// Probabilities entering a log are clamped to `[KL_CLAMP, 1 - KL_CLAMP]`.
pub const KL_CLAMP: f32 = 1e-6;
/// Variances below this are treated as zero in the correlation.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_vq_codebook: f64,
    pub w_vq_commit: f64,
    pub w_content: f64,
    pub w_decrease: f64,
    pub w_sparse: f64,
    pub p_star: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_recon: 1.0,
            w_vq_codebook: 1.0,
            w_vq_commit: 0.25,
            w_content: 1.0,
            w_decrease: 50.0,
            w_sparse: 0.005,
            p_star: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            ("w_recon", self.w_recon),
            ("w_vq_codebook", self.w_vq_codebook),
            ("w_vq_commit", self.w_vq_commit),
            ("w_content", self.w_content),
            ("w_decrease", self.w_decrease),
            ("w_sparse", self.w_sparse),
        ];
        for (name, v) in w {
            if !v.is_finite() || v < 0.0 {
                return Err(StatError::Config(format!(
                    "losses.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(StatError::Config(format!(
                "losses.p_star must lie in (0, 1), got {}",
                self.p_star
            )));
        }
        Ok(())
    }
}

/// Batch-mean reconstruction error and its per-sample values (both `[B]`
/// and scalar live on the graph).
pub struct Recon {
    pub scalar: Var,
    pub per_sample: Var,
}

/// Mean squared error over `C*H*W` per sample, then averaged over the batch.
pub fn recon_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Recon> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(StatError::shape("recon_loss", g.shape(x), g.shape(x_hat)));
    }
    let b = g.shape(x).first().copied().unwrap_or(1);
    let n = g.value(x).numel() / b.max(1);
    let d = g.sub(x_hat, x)?;
    let d = g.square(d);
    let d = g.reshape(d, &[b, n])?;
    let per_sample = g.mean_last(d);
    let scalar = g.mean(per_sample);
    Ok(Recon { scalar, per_sample })
}

/// `(1 - corr(proxy, T))^2` with population statistics over the batch.
/// `proxy` is treated as a constant. When either vector is degenerate
/// (variance below [`VAR_FLOOR`]) the loss is the constant 1.
pub fn content_loss(g: &mut Graph, proxy: &[f32], t: Var) -> Result<Var> {
    let b = proxy.len();
    if g.shape(t) != [b] {
        return Err(StatError::shape("content_loss", g.shape(t), &[b]));
    }
    if b < 2 {
        return Err(StatError::InvalidArgument(format!(
            "content_loss needs a batch of at least 2, got {b}"
        )));
    }
    let (pc, var_p) = centered(proxy.iter().map(|&v| v as f64));
    let (_, var_t) = centered(g.data(t).iter().map(|&v| v as f64));
    if var_p < VAR_FLOOR || var_t < VAR_FLOOR {
        return Ok(g.constant(Tensor::scalar(1.0)));
    }
    let pc: Vec<f32> = pc.iter().map(|&v| (v / var_p.sqrt()) as f32).collect();
    let pc = g.constant(Tensor::from_vec(pc));
    let mean_t = g.mean(t);
    let neg_mean = g.scale(mean_t, -1.0);
    let tc = g.add_bcast(t, neg_mean)?;
    let sq = g.square(tc);
    let var = g.mean(sq);
    let var = g.max_const(var, VAR_FLOOR as f32);
    let inv_std = g.powf(var, -0.5);
    let prod = g.mul(tc, pc)?;
    let cov = g.mean(prod);
    let corr = g.mul(cov, inv_std)?;
    let one_minus = g.scale(corr, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    Ok(g.square(one_minus))
}

fn centered(v: impl Iterator<Item = f64>) -> (Vec<f64>, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / n;
    (c, var)
}

/// Batch mean of `sum_i max(0, p_i - p_{i-1})` over each `[B, L]` profile.
pub fn decrease_loss(g: &mut Graph, p: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(StatError::InvalidArgument(format!(
            "decrease_loss needs profiles [B, L] with L >= 2, got {shape:?}"
        )));
    }
    let l = shape[1];
    let next = g.slice(p, 1, 1, l - 1)?;
    let prev = g.slice(p, 1, 0, l - 1)?;
    let up = g.sub(next, prev)?;
    let up = g.max_const(up, 0.0);
    let per = g.sum_last(up);
    Ok(g.mean(per))
}

/// Batch mean of `KL(Bern(p*) || Bern(mean_i p_i))`, in nats.
pub fn sparse_loss(g: &mut Graph, p: Var, p_star: f64) -> Result<Var> {
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(StatError::InvalidArgument(format!(
            "p_star must lie in (0, 1), got {p_star}"
        )));
    }
    if g.shape(p).len() != 2 {
        return Err(StatError::shape("sparse_loss", g.shape(p), &[0, 0]));
    }
    let pbar = g.mean_last(p);
    let pbar = g.clamp(pbar, KL_CLAMP, 1.0 - KL_CLAMP);
    let log_p = g.log(pbar);
    let q = g.scale(pbar, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q);
    let a = g.scale(log_p, -p_star as f32);
    let b = g.scale(log_q, -(1.0 - p_star) as f32);
    let kl = g.add(a, b)?;
    let entropy = p_star * p_star.ln() + (1.0 - p_star) * (1.0 - p_star).ln();
    let kl = g.add_scalar(kl, entropy as f32);
    Ok(g.mean(kl))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Graph nodes of every loss component; the stage-2 terms are optional.
pub struct LossParts {
    pub recon: Recon,
    pub codebook: Var,
    pub commit: Var,
    pub content: Option<Var>,
    pub decrease: Option<Var>,
    pub sparse: Option<Var>,
}

/// Component values of one step. `total` is the weighted sum computed in f64.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub content: f64,
    pub decrease: f64,
    pub sparse: f64,
    pub per_sample_recon: Vec<f32>,
}

/// Weighted sum of the stage's components, as a graph node plus a report.
pub fn composite(
    g: &mut Graph,
    stage: Stage,
    parts: &LossParts,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let mut terms = vec![
        (parts.recon.scalar, w.w_recon),
        (parts.codebook, w.w_vq_codebook),
        (parts.commit, w.w_vq_commit),
    ];
    let val = |g: &Graph, v: Var| g.value(v).item() as f64;
    let mut report = LossReport {
        recon: val(g, parts.recon.scalar),
        codebook: val(g, parts.codebook),
        commit: val(g, parts.commit),
        per_sample_recon: g.data(parts.recon.per_sample).to_vec(),
        ..LossReport::default()
    };
    if stage == Stage::Two {
        let missing =
            |name: &str| StatError::InvalidArgument(format!("stage-2 loss needs `{name}`"));
        let content = parts.content.ok_or_else(|| missing("content"))?;
        let decrease = parts.decrease.ok_or_else(|| missing("decrease"))?;
        let sparse = parts.sparse.ok_or_else(|| missing("sparse"))?;
        report.content = val(g, content);
        report.decrease = val(g, decrease);
        report.sparse = val(g, sparse);
        terms.extend([
            (content, w.w_content),
            (decrease, w.w_decrease),
            (sparse, w.w_sparse),
        ]);
    }
    report.total = terms.iter().map(|&(v, wt)| wt * val(g, v)).sum();
    let mut total = g.scale(terms[0].0, terms[0].1 as f32);
    for &(v, wt) in &terms[1..] {
        let s = g.scale(v, wt as f32);
        total = g.add(total, s)?;
    }
    Ok((total, report))
}
