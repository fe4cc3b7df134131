//! Building blocks shared by the tokenizer and the autoregressive model.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

const LN_EPS: f32 = 1e-5;

/// Fully connected layer, weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_linear_weight(format!("{name}.weight"), fan_in, fan_out, rng)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a 4x GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, 4 * dim, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * dim, dim, rng)?,
            heads,
        })
    }

    /// `x [B, S, D]`; `mask` is an additive `[S, S]` attention bias.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attention(g, store, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }

    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let nh = self.heads;
        let dh = d / nh;
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = g.reshape(qkv, &[b, s, 3, nh, dh])?;
        // [3, B, H, S, dh]
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |g: &mut Graph, i: usize| -> Result<Var> {
            let t = g.slice(qkv, 0, i, 1)?;
            g.reshape(t, &[b, nh, s, dh])
        };
        let q = part(g, 0)?;
        let k = part(g, 1)?;
        let v = part(g, 2)?;
        let scores = g.bmm(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        if let Some(m) = mask {
            scores = g.add_bcast(scores, m)?;
        }
        let att = g.softmax(scores);
        let out = g.bmm(att, v, false)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, s, d])?;
        self.proj.forward(g, store, out)
    }
}

/// Additive causal mask: 0 on and below the diagonal, -1e9 above.
pub fn causal_mask(s: usize) -> Tensor {
    let mut data = vec![0.0; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = -1e9;
        }
    }
    Tensor::new([s, s], data).expect("square mask")
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_embedding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = angle.sin() as f32;
            data[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new([len, dim], data).expect("table shape")
}

/// Broadcasts `table [S, D]` to `[B, S, D]`.
pub fn broadcast_batch(g: &mut Graph, table: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![batch];
    shape.extend_from_slice(g.shape(table));
    let zeros = g.constant(Tensor::zeros(shape));
    g.add_bcast(zeros, table)
}
