//! Class-conditional causal transformer over tokenizer codes with an
//! End-of-Sequence token, trained on threshold-truncated prefixes.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::eos_position;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{BatchSampler, Dataset};
use crate::error::{Result, StatError};
use crate::io::write_csv_atomic;
use crate::model::layers::{causal_mask, Block, LayerNorm, Linear};
use crate::model::Tokenizer;
use crate::rng;
use crate::trainer::{
    clip_global_norm, collect_grads, find_non_finite, AdamConfig, AdamW, Schedule,
};

/// Thresholds drawn with probability [`FIXED_TAU_PROB`] when building
/// training sequences.
pub const FIXED_TAUS: [f64; 6] = [0.99, 0.5, 0.25, 0.1, 0.01, 0.001];
pub const FIXED_TAU_PROB: f64 = 0.75;
const EMBED_INIT: f32 = 0.05;
/// Temperatures at or below this sample by argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub end_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub null_class_dropout: f64,
    /// Train on a single threshold instead of the randomised draw.
    pub fixed_tau: Option<f64>,
    pub guidance_scale: f64,
    pub temperature: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            hidden_dim: 128,
            layers: 4,
            heads: 4,
            batch_size: 64,
            steps: 2000,
            warmup_steps: 100,
            base_lr: 1e-3,
            end_lr: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            null_class_dropout: 0.1,
            fixed_tau: None,
            guidance_scale: 1.5,
            temperature: 1.0,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(StatError::Config(format!(
                "ar.hidden_dim {} must be a positive multiple of ar.heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.batch_size == 0 {
            return Err(StatError::Config("ar.batch_size must be positive".into()));
        }
        self.schedule().validate()?;
        if !(0.0..=1.0).contains(&self.null_class_dropout) {
            return Err(StatError::Config(
                "ar.null_class_dropout must lie in [0, 1]".into(),
            ));
        }
        if let Some(t) = self.fixed_tau {
            if !(t > 0.0 && t < 1.0) {
                return Err(StatError::Config(format!(
                    "ar.fixed_tau must lie in (0, 1), got {t}"
                )));
            }
        }
        if !(self.temperature > 0.0) || !self.guidance_scale.is_finite() {
            return Err(StatError::Config(
                "ar.temperature must be positive and ar.guidance_scale finite".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(StatError::Config(
                "ar.grad_clip must be positive and ar.weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            end_lr: self.end_lr,
        }
    }
}

/// A class label and a code prefix of length `k = codes.len()`; the EoS
/// token follows the prefix implicitly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArSequence {
    pub class_id: usize,
    pub codes: Vec<usize>,
}

impl ArSequence {
    pub fn eos_pos(&self) -> usize {
        self.codes.len()
    }
}

/// Draws `tau` (a fixed-set value with probability 0.75, else uniform) and
/// truncates `indices` at `eos_position(p_row, tau)`.
pub fn make_training_sequence<R: Rng>(
    class_id: usize,
    indices: &[usize],
    p_row: &[f32],
    rng: &mut R,
) -> (ArSequence, f64) {
    let tau = if rng.gen::<f64>() < FIXED_TAU_PROB {
        FIXED_TAUS[rng.gen_range(0..FIXED_TAUS.len())]
    } else {
        rng.gen::<f64>()
    };
    (make_sequence_at(class_id, indices, p_row, tau), tau)
}

/// Prefix truncated at a given threshold.
pub fn make_sequence_at(class_id: usize, indices: &[usize], p_row: &[f32], tau: f64) -> ArSequence {
    let k = eos_position(p_row, tau);
    ArSequence {
        class_id,
        codes: indices[..k].to_vec(),
    }
}

/// Decoder-only transformer. Position 0 holds the class embedding,
/// position `t + 1` the code `z_t`; the output at position `t` predicts
/// `z_t`, or EoS (id `codebook_size`) at `t = k`.
#[derive(Clone, Debug)]
pub struct ArModel {
    pub config: ArConfig,
    pub codebook_size: usize,
    pub latent_len: usize,
    pub num_classes: usize,
    pub params: ParamStore,
    class_embed: ParamId,
    code_embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ArModel {
    pub fn new<R: Rng>(
        config: ArConfig,
        codebook_size: usize,
        latent_len: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if codebook_size == 0 || latent_len == 0 || num_classes == 0 {
            return Err(StatError::Config(
                "AR model needs positive codebook size, sequence length and class count".into(),
            ));
        }
        let d = config.hidden_dim;
        let mut s = ParamStore::new();
        let class_embed = s.add_uniform("class_embed", &[num_classes + 1, d], EMBED_INIT, rng)?;
        let code_embed = s.add_uniform("code_embed", &[codebook_size, d], EMBED_INIT, rng)?;
        let pos = s.add_uniform("pos_embed", &[latent_len + 1, d], EMBED_INIT, rng)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut s, &format!("blocks.{i}"), d, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut s, "ln_f", d)?;
        let head = Linear::new(&mut s, "head", d, codebook_size + 1, rng)?;
        Ok(ArModel {
            config,
            codebook_size,
            latent_len,
            num_classes,
            params: s,
            class_embed,
            code_embed,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn eos(&self) -> usize {
        self.codebook_size
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    /// Logits `[B, S, V]` for class ids `classes [B]` followed by
    /// `codes [B, S - 1]` (row-major).
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        classes: &[usize],
        codes: &[usize],
        seq: usize,
    ) -> Result<Var> {
        let b = classes.len();
        if seq == 0 || seq > self.latent_len + 1 || codes.len() != b * (seq - 1) {
            return Err(StatError::InvalidArgument(format!(
                "AR input of {} codes does not fit {b} sequences of length {seq}",
                codes.len()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > self.num_classes) {
            return Err(StatError::InvalidArgument(format!(
                "class id {c} out of range"
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= self.codebook_size) {
            return Err(StatError::InvalidArgument(format!(
                "code id {c} outside the codebook of {}",
                self.codebook_size
            )));
        }
        let ce = g.param(store, self.class_embed);
        let cls = g.gather(ce, classes, &[b, 1])?;
        let mut h = if seq > 1 {
            let table = g.param(store, self.code_embed);
            let toks = g.gather(table, codes, &[b, seq - 1])?;
            g.concat(&[cls, toks], 1)?
        } else {
            cls
        };
        let pos = g.param(store, self.pos);
        let pos = g.slice(pos, 0, 0, seq)?;
        h = g.add_bcast(h, pos)?;
        let mask = g.constant(causal_mask(seq));
        for blk in &self.blocks {
            h = blk.forward(g, store, h, Some(mask))?;
        }
        let h = self.ln_f.forward(g, store, h)?;
        let out = self.head.forward(g, store, h)?;
        Ok(out)
    }

    /// Mean next-token cross-entropy over every supervised position (the
    /// codes and the EoS of each sequence). Class ids are replaced by the
    /// null class with probability `null_dropout`.
    pub fn loss<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[ArSequence],
        null_dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let s = self.latent_len + 1;
        let b = batch.len();
        let mut classes = Vec::with_capacity(b);
        let mut inputs = vec![0usize; b * (s - 1)];
        let mut targets = vec![None; b * s];
        for (j, seq) in batch.iter().enumerate() {
            let k = seq.eos_pos();
            if k < 1 || k > self.latent_len {
                return Err(StatError::InvalidArgument(format!(
                    "sequence length {k} outside [1, {}]",
                    self.latent_len
                )));
            }
            let drop = null_dropout > 0.0 && rng.gen::<f64>() < null_dropout;
            classes.push(if drop {
                self.null_class()
            } else {
                seq.class_id
            });
            for (t, &c) in seq.codes.iter().enumerate() {
                if c >= self.codebook_size {
                    return Err(StatError::InvalidArgument(format!(
                        "code id {c} outside the codebook of {}",
                        self.codebook_size
                    )));
                }
                inputs[j * (s - 1) + t] = c;
                targets[j * s + t] = Some(c);
            }
            targets[j * s + k] = Some(self.eos());
        }
        self.loss_on(g, store, &classes, &inputs, &targets)
    }

    /// Cross-entropy on explicit padded inputs `[B, L]` and targets `[B, L + 1]`.
    pub fn loss_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        classes: &[usize],
        inputs: &[usize],
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let s = self.latent_len + 1;
        let logits = self.logits(g, store, classes, inputs, s)?;
        let logits = g.reshape(logits, &[classes.len() * s, self.vocab_size()])?;
        g.cross_entropy(logits, targets)
    }

    /// Samples one sequence with classifier-free guidance
    /// `null + s * (cond - null)`. EoS is masked at the first position and
    /// forced after `L` codes.
    pub fn sample<R: Rng>(
        &self,
        class_id: usize,
        temperature: f64,
        guidance: f64,
        rng: &mut R,
    ) -> Result<ArSequence> {
        if class_id >= self.num_classes {
            return Err(StatError::InvalidArgument(format!(
                "class {class_id} outside [0, {})",
                self.num_classes
            )));
        }
        if !(temperature > 0.0) {
            return Err(StatError::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        let use_null = guidance != 1.0;
        let v = self.vocab_size();
        let mut codes: Vec<usize> = Vec::new();
        while codes.len() < self.latent_len {
            let t = codes.len();
            let mut g = Graph::inference();
            let (classes, inputs) = if use_null {
                let mut inp = codes.clone();
                inp.extend_from_slice(&codes);
                (vec![class_id, self.null_class()], inp)
            } else {
                (vec![class_id], codes.clone())
            };
            let out = self.logits(&mut g, &self.params, &classes, &inputs, t + 1)?;
            let data = g.data(out);
            let row = |j: usize| &data[(j * (t + 1) + t) * v..(j * (t + 1) + t + 1) * v];
            let mut logits: Vec<f64> = if use_null {
                row(0)
                    .iter()
                    .zip(row(1))
                    .map(|(&c, &n)| n as f64 + guidance * (c as f64 - n as f64))
                    .collect()
            } else {
                row(0).iter().map(|&c| c as f64).collect()
            };
            if t == 0 {
                logits[self.eos()] = f64::NEG_INFINITY;
            }
            let next = pick(&logits, temperature, rng);
            if next == self.eos() {
                break;
            }
            codes.push(next);
        }
        Ok(ArSequence { class_id, codes })
    }

    /// `n` independent samples, sample `i` drawing from stream `i` of `seed`.
    pub fn sample_many(
        &self,
        class_id: usize,
        n: usize,
        temperature: f64,
        guidance: f64,
        seed: u64,
    ) -> Result<Vec<ArSequence>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, rng::DOMAIN_SAMPLE, i as u64);
                self.sample(class_id, temperature, guidance, &mut r)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        let rec = [
            c.hidden_dim,
            c.layers,
            c.heads,
            self.codebook_size,
            self.latent_len,
            self.num_classes,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect();
        ck.push("config.ar", Tensor::from_vec(rec))?;
        for (_, p) in self.params.iter() {
            ck.push(format!("ar.{}", p.name), p.tensor.clone())?;
        }
        Ok(ck)
    }

    /// Rebuilds the network from `config.ar`; training and sampling
    /// settings come from `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: ArConfig) -> Result<Self> {
        let r = ck.require("config.ar")?.data();
        if r.len() != 6 || r.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(StatError::Checkpoint("malformed config.ar record".into()));
        }
        let u = |i: usize| r[i] as usize;
        let config = ArConfig {
            hidden_dim: u(0),
            layers: u(1),
            heads: u(2),
            ..config
        };
        let mut rng = rng::stream(0, rng::DOMAIN_INIT, 0);
        let mut m = ArModel::new(config, u(3), u(4), u(5), &mut rng)?;
        m.params.load_from(&ck.params_with_prefix("ar."))?;
        Ok(m)
    }
}

/// Argmax (lowest index on ties) at tiny temperature, otherwise a draw from
/// `softmax(logits / temperature)`.
fn pick<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= ARGMAX_TEMPERATURE {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if u < wi {
                return i;
            }
            u -= wi;
        }
    }
    w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
}

/// Codes and keep profiles of a dataset under a trained tokenizer.
#[derive(Clone, Debug)]
pub struct TokenizedSet {
    pub latent_len: usize,
    pub labels: Vec<usize>,
    pub codes: Vec<usize>,
    pub p: Vec<f32>,
}

impl TokenizedSet {
    pub fn from_dataset(tok: &Tokenizer, data: &Dataset, batch_size: usize) -> Result<Self> {
        let l = tok.config.latent_len;
        let mut set = TokenizedSet {
            latent_len: l,
            labels: Vec::with_capacity(data.len()),
            codes: Vec::with_capacity(data.len() * l),
            p: Vec::with_capacity(data.len() * l),
        };
        for b in data.sequential_batches(batch_size.max(1)) {
            let a = tok.analyze(&b.pixels)?;
            set.labels.extend_from_slice(&b.labels);
            set.codes.extend_from_slice(&a.indices);
            set.p.extend_from_slice(&a.p);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn codes_row(&self, i: usize) -> &[usize] {
        &self.codes[i * self.latent_len..(i + 1) * self.latent_len]
    }

    pub fn p_row(&self, i: usize) -> &[f32] {
        &self.p[i * self.latent_len..(i + 1) * self.latent_len]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_ar_log(rows: &[ArLogRow], path: &Path) -> Result<()> {
    write_csv_atomic(path, |w| {
        w.write_record(["step", "lr", "loss"])?;
        for r in rows {
            w.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string()])?;
        }
        Ok(())
    })
}

/// Trains a fresh AR model on `set` for `config.steps` steps.
pub fn train_ar(
    config: ArConfig,
    set: &TokenizedSet,
    codebook_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(ArModel, Vec<ArLogRow>)> {
    if set.is_empty() {
        return Err(StatError::InvalidArgument("empty AR training set".into()));
    }
    if let Some(&c) = set.labels.iter().find(|&&c| c >= num_classes) {
        return Err(StatError::InvalidArgument(format!(
            "label {c} outside [0, {num_classes})"
        )));
    }
    let mut model = ArModel::new(
        config.clone(),
        codebook_size,
        set.latent_len,
        num_classes,
        &mut rng::stream(seed, rng::DOMAIN_INIT, 2),
    )?;
    let mut opt = AdamW::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let sched = config.schedule();
    let mut sampler = BatchSampler::new(set.len(), config.batch_size, seed);
    let mut log = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let mut r = rng::stream(seed, rng::DOMAIN_AR, step);
        let batch: Vec<ArSequence> = sampler
            .batch_indices(step)
            .into_iter()
            .map(|i| match config.fixed_tau {
                Some(tau) => make_sequence_at(set.labels[i], set.codes_row(i), set.p_row(i), tau),
                None => {
                    make_training_sequence(set.labels[i], set.codes_row(i), set.p_row(i), &mut r).0
                }
            })
            .collect();
        let mut g = Graph::new();
        let loss = model.loss(
            &mut g,
            &model.params,
            &batch,
            config.null_class_dropout,
            &mut r,
        )?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        let mut grads = collect_grads(&g, grads, &model.params);
        drop(g);
        if let Some(name) = find_non_finite(&model.params, &grads) {
            log::warn!("AR step {step}: non-finite gradient in `{name}`, update skipped");
            continue;
        }
        clip_global_norm(&mut grads, config.grad_clip);
        let lr = sched.lr_at(step);
        let lrs = vec![lr; model.params.len()];
        opt.step(&mut model.params, &grads, &lrs)?;
        if step % 100 == 0 {
            log::info!("AR step {step}: loss {value:.4}");
        }
        log.push(ArLogRow {
            step,
            lr,
            loss: value,
        });
    }
    Ok((model, log))
}

/// Mean per-token cross-entropy (no class dropout) of `model` on sequences.
pub fn mean_cross_entropy(model: &ArModel, seqs: &[ArSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let mut g = Graph::inference();
        let mut none = rng::stream(0, rng::DOMAIN_EVAL, 0);
        let loss = model.loss(&mut g, &model.params, chunk, 0.0, &mut none)?;
        let n: usize = chunk.iter().map(|s| s.eos_pos() + 1).sum();
        total += g.value(loss).item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Token dump: `sample_id,class,k,codes...`.
pub fn write_token_dump(seqs: &[ArSequence], path: &Path) -> Result<()> {
    write_csv_atomic(path, |w| {
        for (i, s) in seqs.iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                s.class_id.to_string(),
                s.eos_pos().to_string(),
            ];
            rec.extend(s.codes.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArModel {
        let cfg = ArConfig {
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            ..ArConfig::default()
        };
        ArModel::new(cfg, 10, 4, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn sequence_examples() {
        let p = [0.9, 0.6, 0.4, 0.1];
        assert_eq!(
            make_sequence_at(0, &[5, 6, 7, 8], &p, 0.25).codes,
            vec![5, 6, 7]
        );
        assert_eq!(
            make_sequence_at(0, &[5, 6, 7, 8], &[0.9; 4], 0.5).eos_pos(),
            4
        );
    }

    #[test]
    fn fixed_set_fraction() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let fixed = (0..n)
            .filter(|_| {
                let (_, tau) = make_training_sequence(0, &[0; 4], &[0.5; 4], &mut r);
                FIXED_TAUS.contains(&tau)
            })
            .count();
        let frac = fixed as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = tiny();
        let head_w = m.params.id("head.weight").unwrap();
        m.params.tensor_mut(head_w).data_mut().fill(0.0);
        let batch = vec![
            ArSequence {
                class_id: 0,
                codes: vec![1, 2],
            },
            ArSequence {
                class_id: 2,
                codes: vec![3, 4, 5, 6],
            },
        ];
        let mut g = Graph::new();
        let loss = m
            .loss(
                &mut g,
                &m.params,
                &batch,
                0.0,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert!((g.value(loss).item() as f64 - (11f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn argmax_sampling_is_deterministic_and_terminates() {
        let m = tiny();
        let a = m
            .sample(1, 1e-9, 2.0, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = m
            .sample(1, 1e-9, 2.0, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a, b);
        for s in m.sample_many(0, 20, 1.0, 1.5, 9).unwrap() {
            assert!((1..=4).contains(&s.eos_pos()));
            assert!(s.codes.iter().all(|&c| c < 10));
        }
    }

    #[test]
    fn pick_respects_masked_entries() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let l = [0.0, f64::NEG_INFINITY, 0.0];
        for _ in 0..200 {
            assert_ne!(pick(&l, 1.0, &mut r), 1);
        }
        assert_eq!(pick(&[1.0, 3.0, 3.0], 1e-9, &mut r), 1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny();
        let ck = m.to_checkpoint().unwrap();
        let back = ArModel::from_checkpoint(&ck, ArConfig::default()).unwrap();
        assert_eq!(back.params.params(), m.params.params());
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), ck.to_bytes());
    }
}
