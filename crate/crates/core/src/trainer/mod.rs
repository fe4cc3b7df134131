//! Two-stage tokenizer training: hard tail dropping, then Bernoulli-gated
//! soft tail dropping with the keep-profile priors.

mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{
    clip_global_norm, collect_grads, find_non_finite, AdamConfig, AdamW, ParamGrads, Schedule,
};

use crate::allocation::sample_hard_tail;
use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::{u64_from_record, u64_to_record, Checkpoint};
use crate::dataset::{BatchSampler, Dataset};
use crate::error::{Result, StatError};
use crate::io::write_csv_atomic;
use crate::losses::{
    composite, content_loss, decrease_loss, recon_loss, sparse_loss, LossParts, LossReport,
    LossWeights, Stage,
};
use crate::model::{Tokenizer, TokenizerConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub head_lr: f64,
    pub end_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub l_min: usize,
    pub l_max: usize,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 64,
            stage1_steps: 3000,
            stage2_steps: 5000,
            warmup_steps: 200,
            base_lr: 1e-3,
            head_lr: 2e-4,
            end_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            l_min: 10,
            l_max: 16,
            checkpoint_every: 500,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, latent_len: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(StatError::Config(
                "trainer.batch_size must be at least 2 (the content loss correlates across the batch)".into(),
            ));
        }
        for stage in [Stage::One, Stage::Two] {
            self.schedule(stage).validate()?;
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(StatError::Config("trainer.head_lr must be positive".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(StatError::Config(format!(
                    "trainer.{name} must lie in [0, 1)"
                )));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(StatError::Config(
                "trainer.adam_eps and trainer.grad_clip must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.l_min < 1 || self.l_min > self.l_max || self.l_max > latent_len {
            return Err(StatError::Config(format!(
                "trainer needs 1 <= l_min <= l_max <= latent_len, got {} / {} / {latent_len}",
                self.l_min, self.l_max
            )));
        }
        Ok(())
    }

    pub fn schedule(&self, stage: Stage) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: match stage {
                Stage::One => self.stage1_steps,
                Stage::Two => self.stage2_steps,
            },
            end_lr: self.end_lr,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub content: f64,
    pub decrease: f64,
    pub sparse: f64,
    /// Batch mean of `T` in stage 2; the sampled prefix length in stage 1.
    pub mean_t: f64,
}

impl LogRow {
    fn new(step: u64, lr: f64, r: &LossReport, mean_t: f64) -> Self {
        LogRow {
            step,
            lr,
            total: r.total,
            recon: r.recon,
            codebook: r.codebook,
            commit: r.commit,
            content: r.content,
            decrease: r.decrease,
            sparse: r.sparse,
            mean_t,
        }
    }
}

pub const LOG_HEADER: [&str; 10] = [
    "step", "lr", "total", "recon", "codebook", "commit", "content", "decrease", "sparse", "mean_T",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: Vec<u64>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_atomic(path, |w| {
            w.write_record(LOG_HEADER)?;
            for r in &self.rows {
                w.write_record([
                    r.step.to_string(),
                    r.lr.to_string(),
                    r.total.to_string(),
                    r.recon.to_string(),
                    r.codebook.to_string(),
                    r.commit.to_string(),
                    r.content.to_string(),
                    r.decrease.to_string(),
                    r.sparse.to_string(),
                    r.mean_t.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    /// Reads a log written by [`TrainingLog::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad =
                || StatError::InvalidArgument(format!("malformed log row in {}", path.display()));
            let f = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(bad)
            };
            if rec.len() != LOG_HEADER.len() {
                return Err(bad());
            }
            rows.push(LogRow {
                step: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                lr: f(1)?,
                total: f(2)?,
                recon: f(3)?,
                codebook: f(4)?,
                commit: f(5)?,
                content: f(6)?,
                decrease: f(7)?,
                sparse: f(8)?,
                mean_t: f(9)?,
            });
        }
        Ok(TrainingLog {
            rows,
            skipped: Vec::new(),
        })
    }
}

/// Resumable training state for one stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Tokenizer,
    pub optimizer: AdamW,
    pub stage: Stage,
    /// Next step to run.
    pub step: u64,
    pub seed: u64,
    pub config: TrainerConfig,
    pub weights: LossWeights,
    sampler: Option<BatchSampler>,
}

impl Trainer {
    /// Fresh stage-1 run on a randomly initialised tokenizer.
    pub fn stage1(
        model_config: TokenizerConfig,
        config: TrainerConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        config.validate(model_config.latent_len)?;
        weights.validate()?;
        let model = Tokenizer::new(model_config, &mut rng::stream(seed, rng::DOMAIN_INIT, 0))?;
        Ok(Self::with_model(model, Stage::One, config, weights, seed))
    }

    /// Stage-2 run starting from stage-1 weights with a fresh probability head.
    pub fn stage2(
        mut model: Tokenizer,
        config: TrainerConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        config.validate(model.config.latent_len)?;
        weights.validate()?;
        model.reinit_prob_head(&mut rng::stream(seed, rng::DOMAIN_INIT, 1))?;
        Ok(Self::with_model(model, Stage::Two, config, weights, seed))
    }

    fn with_model(
        model: Tokenizer,
        stage: Stage,
        config: TrainerConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Self {
        let optimizer = AdamW::new(config.adam(), &model.params);
        Trainer {
            model,
            optimizer,
            stage,
            step: 0,
            seed,
            config,
            weights,
            sampler: None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.config.schedule(self.stage).total_steps
    }

    fn learning_rates(&self, step: u64) -> (f64, Vec<f64>) {
        let sched = self.config.schedule(self.stage);
        let main = sched.lr_at(step);
        let head = sched.lr_at_scaled(step, self.config.head_lr);
        let lrs = self
            .model
            .params
            .iter()
            .map(|(_, p)| {
                if Tokenizer::is_prob_head(&p.name) {
                    head
                } else {
                    main
                }
            })
            .collect();
        (main, lrs)
    }

    /// Runs one optimisation step; `None` when the step was skipped.
    pub fn train_step(&mut self, data: &Dataset) -> Result<Option<LogRow>> {
        self.check_data(data)?;
        let step = self.step;
        let bs = self.config.batch_size;
        let seed = self.seed;
        let sampler = self
            .sampler
            .get_or_insert_with(|| BatchSampler::new(data.len(), bs, seed));
        let batch = data.batch(&sampler.batch_indices(step));

        let model = &self.model;
        let store = &model.params;
        let mut g = Graph::new();
        let x = g.constant(batch.pixels);
        let (parts, mean_t) = match self.stage {
            Stage::One => {
                let mut r = rng::stream(seed, rng::DOMAIN_STAGE1, step);
                let l = model.config.latent_len;
                let (k, _) = sample_hard_tail(&mut r, self.config.l_min, self.config.l_max, l)?;
                let out = model.forward_stage1(&mut g, store, x, k)?;
                let recon = recon_loss(&mut g, x, out.x_hat)?;
                let parts = LossParts {
                    recon,
                    codebook: out.quant.codebook_loss,
                    commit: out.quant.commitment_loss,
                    content: None,
                    decrease: None,
                    sparse: None,
                };
                (parts, k as f64)
            }
            Stage::Two => {
                let mut r = rng::stream(seed, rng::DOMAIN_STAGE2, step);
                let out = model.forward_stage2(&mut g, store, x, &mut r, None)?;
                let parts = stage2_parts(&mut g, x, &out, self.weights.p_star, None)?;
                let t = g.data(out.t);
                let mean_t = t.iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
                (parts, mean_t)
            }
        };
        let (total, report) = composite(&mut g, self.stage, &parts, &self.weights)?;
        let grads = g.backward(total)?;
        let mut grads = collect_grads(&g, grads, store);
        drop(g);

        self.step += 1;
        if let Some(name) = find_non_finite(&self.model.params, &grads) {
            log::warn!("step {step}: non-finite gradient in `{name}`, update skipped");
            return Ok(None);
        }
        clip_global_norm(&mut grads, self.config.grad_clip);
        let (lr, lrs) = self.learning_rates(step);
        self.optimizer.step(&mut self.model.params, &grads, &lrs)?;
        Ok(Some(LogRow::new(step, lr, &report, mean_t)))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let s = self.model.config.image_size;
        if data.height != s || data.width != s {
            return Err(StatError::Geometry(format!(
                "dataset images are {}x{}, tokenizer expects {s}x{s}",
                data.height, data.width
            )));
        }
        if data.is_empty() {
            return Err(StatError::InvalidArgument("empty training set".into()));
        }
        Ok(())
    }

    /// Trains until `until` (at most the stage's total), appending to `log`.
    /// Periodic checkpoints go to `checkpoint` when given.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: u64,
        log: &mut TrainingLog,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let step = self.step;
            match self.train_step(data)? {
                Some(row) => {
                    if step % 100 == 0 {
                        log::info!(
                            "stage {:?} step {step}: total {:.5} recon {:.5} mean_T {:.3}",
                            self.stage,
                            row.total,
                            row.recon,
                            row.mean_t
                        );
                    }
                    log.rows.push(row);
                }
                None => log.skipped.push(step),
            }
            let every = self.config.checkpoint_every;
            if let Some(path) = checkpoint {
                if every > 0 && self.step % every == 0 && self.step < until {
                    self.to_checkpoint()?.save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(
        &mut self,
        data: &Dataset,
        log: &mut TrainingLog,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        self.run_until(data, u64::MAX, log, checkpoint)
    }

    /// Model, optimizer moments and loop position.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = tokenizer_checkpoint(&self.model)?;
        self.optimizer
            .save_into(&mut ck, &self.model.params, "optim.")?;
        ck.push("train.step", u64_to_record(self.step))?;
        ck.push("train.seed", u64_to_record(self.seed))?;
        let stage = match self.stage {
            Stage::One => 1.0,
            Stage::Two => 2.0,
        };
        ck.push("train.stage", Tensor::scalar(stage))?;
        Ok(ck)
    }

    /// Restores a run saved by [`Trainer::to_checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainerConfig, weights: LossWeights) -> Result<Self> {
        let model = load_tokenizer(ck)?;
        config.validate(model.config.latent_len)?;
        let stage = match ck.require("train.stage")?.data() {
            [s] if *s == 1.0 => Stage::One,
            [s] if *s == 2.0 => Stage::Two,
            _ => return Err(StatError::Checkpoint("bad train.stage record".into())),
        };
        let optimizer = AdamW::load_from(config.adam(), ck, &model.params, "optim.")?;
        Ok(Trainer {
            model,
            optimizer,
            stage,
            step: u64_from_record(ck.require("train.step")?)?,
            seed: u64_from_record(ck.require("train.seed")?)?,
            config,
            weights,
            sampler: None,
        })
    }
}

/// Assembles every stage-2 loss term. `proxy` overrides the detached
/// per-sample reconstruction error used as the complexity proxy.
pub fn stage2_parts(
    g: &mut Graph,
    x: crate::autodiff::Var,
    out: &crate::model::Stage2Output,
    p_star: f64,
    proxy: Option<&[f32]>,
) -> Result<LossParts> {
    let recon = recon_loss(g, x, out.x_hat)?;
    let proxy = match proxy {
        Some(p) => p.to_vec(),
        None => g.data(recon.per_sample).to_vec(),
    };
    let content = content_loss(g, &proxy, out.t)?;
    let decrease = decrease_loss(g, out.p)?;
    let sparse = sparse_loss(g, out.p, p_star)?;
    Ok(LossParts {
        recon,
        codebook: out.quant.codebook_loss,
        commit: out.quant.commitment_loss,
        content: Some(content),
        decrease: Some(decrease),
        sparse: Some(sparse),
    })
}

/// Tokenizer weights and config as a checkpoint (`model.*`, `config.tokenizer`).
pub fn tokenizer_checkpoint(model: &Tokenizer) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.push(
        "config.tokenizer",
        Tensor::from_vec(model.config.to_record()),
    )?;
    for (_, p) in model.params.iter() {
        ck.push(format!("model.{}", p.name), p.tensor.clone())?;
    }
    Ok(ck)
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<Tokenizer> {
    let config = TokenizerConfig::from_record(ck.require("config.tokenizer")?.data())?;
    let params = ck.params_with_prefix("model.");
    Tokenizer::from_params(config, &params)
}

/// Convenience wrapper: full stage-1 run from scratch.
pub fn train_stage1(
    model_config: TokenizerConfig,
    config: TrainerConfig,
    weights: LossWeights,
    data: &Dataset,
    seed: u64,
) -> Result<(Tokenizer, TrainingLog)> {
    let mut t = Trainer::stage1(model_config, config, weights, seed)?;
    let mut log = TrainingLog::default();
    t.run(data, &mut log, None)?;
    Ok((t.model, log))
}

/// Convenience wrapper: full stage-2 run from stage-1 weights.
pub fn train_stage2(
    model: Tokenizer,
    config: TrainerConfig,
    weights: LossWeights,
    data: &Dataset,
    seed: u64,
) -> Result<(Tokenizer, TrainingLog)> {
    let mut t = Trainer::stage2(model, config, weights, seed)?;
    let mut log = TrainingLog::default();
    t.run(data, &mut log, None)?;
    Ok((t.model, log))
}
