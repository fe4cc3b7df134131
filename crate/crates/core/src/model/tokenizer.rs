use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{broadcast_batch, sinusoidal_embedding, Block, LayerNorm, Linear};
use crate::allocation::{sample_bernoulli_gate, DropMask, InferencePolicy};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Result, StatError};

/// Keep probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f32 = 1e-6;
/// Initial bias of the probability head's output unit (`sigmoid(2) ~ 0.88`).
pub const PROB_HEAD_BIAS_INIT: f32 = 2.0;
const EMBED_INIT: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub latent_len: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub prob_head_hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 32,
            patch_size: 4,
            hidden_dim: 128,
            latent_len: 16,
            code_dim: 8,
            codebook_size: 256,
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            prob_head_hidden: 128,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("latent_len", self.latent_len),
            ("code_dim", self.code_dim),
            ("codebook_size", self.codebook_size),
            ("heads", self.heads),
            ("prob_head_hidden", self.prob_head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(StatError::Config(format!(
                    "tokenizer.{name} must be positive"
                )));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(StatError::Config(format!(
                "tokenizer.image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(StatError::Config(format!(
                "tokenizer.hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_values(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Integer fields as an f32 vector (exact below 2^24), for checkpoints.
    pub fn to_record(&self) -> Vec<f32> {
        [
            self.image_size,
            self.patch_size,
            self.hidden_dim,
            self.latent_len,
            self.code_dim,
            self.codebook_size,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.prob_head_hidden,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    pub fn from_record(r: &[f32]) -> Result<Self> {
        if r.len() != 10 || r.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(StatError::Checkpoint(
                "malformed tokenizer config record".into(),
            ));
        }
        let u = |i: usize| r[i] as usize;
        let c = TokenizerConfig {
            image_size: u(0),
            patch_size: u(1),
            hidden_dim: u(2),
            latent_len: u(3),
            code_dim: u(4),
            codebook_size: u(5),
            enc_layers: u(6),
            dec_layers: u(7),
            heads: u(8),
            prob_head_hidden: u(9),
        };
        c.validate()
            .map_err(|e| StatError::Checkpoint(format!("stored tokenizer config: {e}")))?;
        Ok(c)
    }
}

/// Index of the entry nearest to `v` in squared Euclidean distance,
/// accumulated in f64; ties go to the lowest index.
pub fn nearest_code(codebook: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in codebook.chunks(dim).enumerate() {
        let d: f64 = e
            .iter()
            .zip(v)
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

pub struct Encoded {
    /// `[B, L, D]`
    pub z_l: Var,
    /// `[B, L]`
    pub p: Var,
}

pub struct Quantized {
    /// `B * L` code ids, row-major.
    pub indices: Vec<usize>,
    /// `[B, L, d_code]`, equal to the selected entries in the forward pass.
    pub z_q: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

pub struct Stage1Output {
    pub x_hat: Var,
    pub quant: Quantized,
}

pub struct Stage2Output {
    pub x_hat: Var,
    pub p: Var,
    pub mask: DropMask,
    /// `[B]` expected token counts.
    pub t: Var,
    pub quant: Quantized,
}

/// Codes and keep profiles for a batch, produced without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub batch: usize,
    pub latent_len: usize,
    pub indices: Vec<usize>,
    pub p: Vec<f32>,
}

impl Analysis {
    pub fn p_row(&self, j: usize) -> &[f32] {
        &self.p[j * self.latent_len..(j + 1) * self.latent_len]
    }

    pub fn codes_row(&self, j: usize) -> &[usize] {
        &self.indices[j * self.latent_len..(j + 1) * self.latent_len]
    }

    /// Expected token count `T_j = sum_i p_ji`.
    pub fn expected_tokens(&self, j: usize) -> f64 {
        self.p_row(j).iter().map(|&v| v as f64).sum()
    }
}

/// The adaptive-length 1D tokenizer: patch encoder with latent tokens,
/// vector quantizer, keep-probability head and output-token decoder.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    patch_pos: ParamId,
    latent_tokens: ParamId,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    quant_proj: Linear,
    codebook: ParamId,
    prob_fc1: Linear,
    prob_fc2: Linear,
    dec_in: Linear,
    dec_pos: ParamId,
    output_tokens: ParamId,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    pixel_head: Linear,
    prob_pe: Tensor,
}

impl Tokenizer {
    pub fn new<R: Rng>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.hidden_dim;
        let mut s = ParamStore::new();
        let patch_embed = Linear::new(&mut s, "enc.patch_embed", c.patch_values(), d, rng)?;
        let patch_pos = s.add_uniform("enc.patch_pos", &[c.num_patches(), d], EMBED_INIT, rng)?;
        let latent_tokens =
            s.add_uniform("enc.latent_tokens", &[c.latent_len, d], EMBED_INIT, rng)?;
        let enc_blocks = (0..c.enc_layers)
            .map(|i| Block::new(&mut s, &format!("enc.blocks.{i}"), d, c.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(&mut s, "enc.ln_f", d)?;
        let quant_proj = Linear::new(&mut s, "quant.proj", d, c.code_dim, rng)?;
        let bound = 1.0 / c.codebook_size as f32;
        let codebook =
            s.add_uniform("quant.codebook", &[c.codebook_size, c.code_dim], bound, rng)?;
        let prob_fc1 = Linear::new(&mut s, "prob_head.fc1", d, c.prob_head_hidden, rng)?;
        let prob_fc2 = Linear::new(&mut s, "prob_head.fc2", c.prob_head_hidden, 1, rng)?;
        s.tensor_mut(prob_fc2.b).data_mut()[0] = PROB_HEAD_BIAS_INIT;
        let dec_in = Linear::new(&mut s, "dec.code_in", c.code_dim, d, rng)?;
        let dec_pos = s.add_uniform("dec.latent_pos", &[c.latent_len, d], EMBED_INIT, rng)?;
        let output_tokens =
            s.add_uniform("dec.output_tokens", &[c.num_patches(), d], EMBED_INIT, rng)?;
        let dec_blocks = (0..c.dec_layers)
            .map(|i| Block::new(&mut s, &format!("dec.blocks.{i}"), d, c.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(&mut s, "dec.ln_f", d)?;
        let pixel_head = Linear::new(&mut s, "dec.pixel_head", d, c.patch_values(), rng)?;
        let prob_pe = sinusoidal_embedding(c.latent_len, d);
        Ok(Tokenizer {
            config,
            params: s,
            patch_embed,
            patch_pos,
            latent_tokens,
            enc_blocks,
            enc_ln,
            quant_proj,
            codebook,
            prob_fc1,
            prob_fc2,
            dec_in,
            dec_pos,
            output_tokens,
            dec_blocks,
            dec_ln,
            pixel_head,
            prob_pe,
        })
    }

    /// Rebuilds the model for `config` and loads `params` by name.
    pub fn from_params(
        config: TokenizerConfig,
        params: &[crate::autodiff::Parameter],
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut t = Tokenizer::new(config, &mut rng)?;
        t.params.load_from(params)?;
        Ok(t)
    }

    /// Fresh probability head (stage-2 start), all other weights untouched.
    pub fn reinit_prob_head<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let mut fresh = ParamStore::new();
        let fc1 = Linear::new(
            &mut fresh,
            "prob_head.fc1",
            c.hidden_dim,
            c.prob_head_hidden,
            rng,
        )?;
        let fc2 = Linear::new(&mut fresh, "prob_head.fc2", c.prob_head_hidden, 1, rng)?;
        fresh.tensor_mut(fc2.b).data_mut()[0] = PROB_HEAD_BIAS_INIT;
        for (src, dst) in [
            (fc1.w, self.prob_fc1.w),
            (fc1.b, self.prob_fc1.b),
            (fc2.w, self.prob_fc2.w),
            (fc2.b, self.prob_fc2.b),
        ] {
            *self.params.tensor_mut(dst) = fresh.tensor(src).clone();
        }
        Ok(())
    }

    /// Output bias of the probability head.
    pub fn prob_head_bias(&self) -> ParamId {
        self.prob_fc2.b
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// True for parameters in the reduced-learning-rate group.
    pub fn is_prob_head(name: &str) -> bool {
        name.starts_with("prob_head.")
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(StatError::Geometry(format!(
                "expected images [B, 3, {s}, {s}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// `[B, 3, H, W] -> [B, N, f*f*3]`, patches row-major, pixels `(dy, dx, c)`.
    fn patchify(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let (f, h) = (self.config.patch_size, self.config.grid());
        let t = g.reshape(x, &[b, 3, h, f, h, f])?;
        let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
        g.reshape(t, &[b, h * h, f * f * 3])
    }

    fn unpatchify(&self, g: &mut Graph, t: Var) -> Result<Var> {
        let b = g.shape(t)[0];
        let (f, h) = (self.config.patch_size, self.config.grid());
        let t = g.reshape(t, &[b, h, h, f, f, 3])?;
        let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
        g.reshape(t, &[b, 3, h * f, h * f])
    }

    /// Encoder and probability head on `x [B, 3, H, W]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Encoded> {
        self.check_images(g.shape(x))?;
        let c = &self.config;
        let b = g.shape(x)[0];
        let patches = self.patchify(g, x)?;
        let emb = self.patch_embed.forward(g, store, patches)?;
        let pos = g.param(store, self.patch_pos);
        let emb = g.add_bcast(emb, pos)?;
        let lat = g.param(store, self.latent_tokens);
        let lat = broadcast_batch(g, lat, b)?;
        let mut h = g.concat(&[emb, lat], 1)?;
        for blk in &self.enc_blocks {
            h = blk.forward(g, store, h, None)?;
        }
        let h = self.enc_ln.forward(g, store, h)?;
        let z_l = g.slice(h, 1, c.num_patches(), c.latent_len)?;
        let p = self.prob_head(g, store, z_l)?;
        Ok(Encoded { z_l, p })
    }

    fn prob_head(&self, g: &mut Graph, store: &ParamStore, z_l: Var) -> Result<Var> {
        let b = g.shape(z_l)[0];
        let pe = g.constant(self.prob_pe.clone());
        let h = g.add_bcast(z_l, pe)?;
        let h = self.prob_fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.prob_fc2.forward(g, store, h)?;
        let h = g.reshape(h, &[b, self.config.latent_len])?;
        let p = g.sigmoid(h);
        Ok(g.clamp(p, P_CLAMP, 1.0 - P_CLAMP))
    }

    /// Nearest-entry quantization of `z_l [B, L, D]`. `forced` pins the
    /// code assignment, which finite-difference checks need.
    pub fn quantize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_l: Var,
        forced: Option<&[usize]>,
    ) -> Result<Quantized> {
        let c = &self.config;
        let proj = self.quant_proj.forward(g, store, z_l)?;
        let shape = g.shape(proj).to_vec();
        let codebook = g.param(store, self.codebook);
        let indices = match forced {
            Some(ix) => {
                if ix.len() * c.code_dim != g.value(proj).numel() {
                    return Err(StatError::shape("quantize", &shape, &[ix.len()]));
                }
                ix.to_vec()
            }
            None => {
                let table = g.data(codebook);
                g.data(proj)
                    .chunks(c.code_dim)
                    .map(|v| nearest_code(table, c.code_dim, v))
                    .collect()
            }
        };
        let entry = g.gather(codebook, &indices, &shape[..shape.len() - 1])?;
        let z_q = g.straight_through(entry, proj)?;
        let proj_sg = g.stop_gradient(proj);
        let d = g.sub(proj_sg, entry)?;
        let d = g.square(d);
        let codebook_loss = g.mean(d);
        let entry_sg = g.stop_gradient(entry);
        let d = g.sub(proj, entry_sg)?;
        let d = g.square(d);
        let commitment_loss = g.mean(d);
        Ok(Quantized {
            indices,
            z_q,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Decoder on already-masked codes `[B, L, d_code]`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[1] != c.latent_len || shape[2] != c.code_dim {
            return Err(StatError::Geometry(format!(
                "expected codes [B, {}, {}], got {shape:?}",
                c.latent_len, c.code_dim
            )));
        }
        let b = shape[0];
        let h = self.dec_in.forward(g, store, z)?;
        let pos = g.param(store, self.dec_pos);
        let h = g.add_bcast(h, pos)?;
        let out = g.param(store, self.output_tokens);
        let out = broadcast_batch(g, out, b)?;
        let mut h = g.concat(&[h, out], 1)?;
        for blk in &self.dec_blocks {
            h = blk.forward(g, store, h, None)?;
        }
        let h = self.dec_ln.forward(g, store, h)?;
        let h = g.slice(h, 1, c.latent_len, c.num_patches())?;
        let px = self.pixel_head.forward(g, store, h)?;
        let img = self.unpatchify(g, px)?;
        Ok(g.clamp(img, -1.0, 1.0))
    }

    /// Hard prefix of `k` tokens for every image.
    pub fn forward_stage1(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        k: usize,
    ) -> Result<Stage1Output> {
        let l = self.config.latent_len;
        if k < 1 || k > l {
            return Err(StatError::InvalidArgument(format!(
                "keep length {k} outside [1, {l}]"
            )));
        }
        let enc = self.encode(g, store, x)?;
        let quant = self.quantize(g, store, enc.z_l, None)?;
        let b = g.shape(x)[0];
        let mask = g.constant(DropMask::prefixes(l, &vec![k; b]).to_tensor());
        let z = g.mul_last(quant.z_q, mask)?;
        let x_hat = self.decode(g, store, z)?;
        Ok(Stage1Output { x_hat, quant })
    }

    /// Bernoulli-gated soft tail dropping with a straight-through mask.
    pub fn forward_stage2<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        rng: &mut R,
        forced_codes: Option<&[usize]>,
    ) -> Result<Stage2Output> {
        let enc = self.encode(g, store, x)?;
        let quant = self.quantize(g, store, enc.z_l, forced_codes)?;
        let (b, l) = (g.shape(x)[0], self.config.latent_len);
        let mask = sample_bernoulli_gate(g.data(enc.p), b, l, rng);
        let hard = g.constant(mask.to_tensor());
        let m = g.straight_through(hard, enc.p)?;
        let z = g.mul_last(quant.z_q, m)?;
        let x_hat = self.decode(g, store, z)?;
        let t = g.sum_last(enc.p);
        Ok(Stage2Output {
            x_hat,
            p: enc.p,
            mask,
            t,
            quant,
        })
    }

    /// Codes and keep profiles for `x [B, 3, H, W]`.
    pub fn analyze(&self, x: &Tensor) -> Result<Analysis> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let enc = self.encode(&mut g, &self.params, xv)?;
        let q = self.quantize(&mut g, &self.params, enc.z_l, None)?;
        Ok(Analysis {
            batch: x.shape()[0],
            latent_len: self.config.latent_len,
            indices: q.indices,
            p: g.data(enc.p).to_vec(),
        })
    }

    /// Decodes code ids `[B * L]` after zeroing the positions dropped by `mask`.
    pub fn decode_codes(&self, indices: &[usize], mask: &DropMask) -> Result<Tensor> {
        let c = &self.config;
        let l = c.latent_len;
        if mask.len() != l || indices.len() != mask.rows() * l {
            return Err(StatError::Geometry(format!(
                "codes ({}) and mask ({}x{}) do not match L={l}",
                indices.len(),
                mask.rows(),
                mask.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c.codebook_size) {
            return Err(StatError::InvalidArgument(format!(
                "code {bad} outside codebook of {}",
                c.codebook_size
            )));
        }
        let mut g = Graph::inference();
        let table = g.param(&self.params, self.codebook);
        let z = g.gather(table, indices, &[mask.rows(), l])?;
        let m = g.constant(mask.to_tensor());
        let z = g.mul_last(z, m)?;
        let x_hat = self.decode(&mut g, &self.params, z)?;
        Ok(g.value(x_hat).clone())
    }

    /// Encode, truncate by `policy`, decode.
    pub fn reconstruct(
        &self,
        x: &Tensor,
        policy: InferencePolicy,
    ) -> Result<(Tensor, Analysis, DropMask)> {
        let a = self.analyze(x)?;
        let mask = crate::allocation::apply_policy(&a.p, a.batch, a.latent_len, policy);
        let x_hat = self.decode_codes(&a.indices, &mask)?;
        Ok((x_hat, a, mask))
    }
}
