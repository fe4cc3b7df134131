use crate::autodiff::{Gradients, Graph, ParamStore, Tensor};
use crate::checkpoint::{u64_from_record, u64_to_record, Checkpoint};
use crate::error::{Result, StatError};

/// Linear warmup from 0 to `base_lr`, then cosine decay to `end_lr` at
/// `total_steps`; constant `end_lr` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub end_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(StatError::Config(format!(
                "warmup_steps {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(StatError::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.end_lr >= 0.0 && self.end_lr <= self.base_lr) {
            return Err(StatError::Config(format!(
                "end_lr {} must lie in [0, base_lr {}]",
                self.end_lr, self.base_lr
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.end_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        self.end_lr + 0.5 * (self.base_lr - self.end_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// The same curve scaled by `group_lr / base_lr`.
    pub fn lr_at_scaled(&self, step: u64, group_lr: f64) -> f64 {
        self.lr_at(step) * group_lr / self.base_lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, decay included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

/// Per-parameter gradients in parameter-id order; `None` where the
/// parameter did not take part in the loss.
pub type ParamGrads = Vec<Option<Vec<f32>>>;

/// Pulls the gradient of every parameter of `store` out of `grads`.
pub fn collect_grads(g: &Graph, mut grads: Gradients, store: &ParamStore) -> ParamGrads {
    let mut out: ParamGrads = vec![None; store.len()];
    for (id, var) in g.param_vars() {
        out[id.index()] = grads.take(var);
    }
    out
}

/// First parameter with a non-finite gradient entry.
pub fn find_non_finite(store: &ParamStore, grads: &ParamGrads) -> Option<String> {
    store
        .iter()
        .zip(grads)
        .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        .map(|((_, p), _)| p.name.clone())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lrs[i]` for parameter `i`. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lrs: &[f64]) -> Result<()> {
        if grads.len() != store.len() || lrs.len() != store.len() || self.m.len() != store.len() {
            return Err(StatError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {} gradients and {} rates for {}",
                self.m.len(),
                grads.len(),
                lrs.len(),
                store.len()
            )));
        }
        if let Some(name) = find_non_finite(store, grads) {
            return Err(StatError::NonFiniteGradient(name));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr = lrs[i];
            let decay = 1.0 - lr * c.weight_decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.tensor_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                w[j] = (w[j] as f64 * decay - update) as f32;
            }
        }
        Ok(())
    }

    /// Moments as `<prefix>m.<name>` / `<prefix>v.<name>` plus `<prefix>t`.
    pub fn save_into(&self, ck: &mut Checkpoint, store: &ParamStore, prefix: &str) -> Result<()> {
        for (i, (_, p)) in store.iter().enumerate() {
            let shape = p.tensor.shape().to_vec();
            ck.push(
                format!("{prefix}m.{}", p.name),
                Tensor::new(shape.clone(), self.m[i].clone())?,
            )?;
            ck.push(
                format!("{prefix}v.{}", p.name),
                Tensor::new(shape, self.v[i].clone())?,
            )?;
        }
        ck.push(format!("{prefix}t"), u64_to_record(self.t))
    }

    pub fn load_from(
        config: AdamConfig,
        ck: &Checkpoint,
        store: &ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        let mut opt = AdamW::new(config, store);
        for (i, (_, p)) in store.iter().enumerate() {
            for (slot, kind) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = ck.require(&format!("{prefix}{kind}.{}", p.name))?;
                if t.shape() != p.tensor.shape() {
                    return Err(StatError::Checkpoint(format!(
                        "optimizer state for `{}` has shape {:?}, parameter has {:?}",
                        p.name,
                        t.shape(),
                        p.tensor.shape()
                    )));
                }
                *slot = t.data().to_vec();
            }
        }
        opt.t = u64_from_record(ck.require(&format!("{prefix}t"))?)?;
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(v.to_vec())).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            base_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 3000,
            end_lr: 1e-5,
        };
        s.validate().unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(200) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(3000) - 1e-5).abs() < 1e-15);
        assert!((s.lr_at(100) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at_scaled(200, 2e-4) - 2e-4).abs() < 1e-15);
        assert!((s.lr_at_scaled(3000, 2e-4) - 2e-6).abs() < 1e-15);
        for step in 200..3000 {
            assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = store(&[0.5, -1.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &s,
        );
        for _ in 0..10 {
            opt.step(&mut s, &vec![Some(vec![0.0, 0.0])], &[1e-3])
                .unwrap();
        }
        assert_eq!(s.tensor(s.id("w").unwrap()).data(), &[0.5, -1.0]);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut s = store(&[1.0]);
        let mut opt = AdamW::new(AdamConfig::default(), &s);
        opt.step(&mut s, &vec![Some(vec![0.0])], &[1e-4]).unwrap();
        let w = s.tensor(s.id("w").unwrap()).data()[0] as f64;
        assert!((w - (1.0 - 1e-8)).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_gives_lr_sized_steps() {
        let mut s = store(&[0.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &s,
        );
        let mut prev = 0.0f64;
        for i in 0..200 {
            opt.step(&mut s, &vec![Some(vec![0.3])], &[1e-2]).unwrap();
            let w = s.tensor(s.id("w").unwrap()).data()[0] as f64;
            if i > 100 {
                assert!(((prev - w) - 1e-2).abs() < 1e-5, "step {}", prev - w);
            }
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamConfig::default(), &s);
        let before = (s.clone(), opt.clone());
        let err = opt
            .step(&mut s, &vec![Some(vec![0.1, f32::NAN])], &[1e-3])
            .unwrap_err();
        assert!(matches!(err, StatError::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.params(), before.0.params());
        assert_eq!(opt, before.1);
    }

    #[test]
    fn clipping() {
        let mut g: ParamGrads = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        let mut small: ParamGrads = vec![Some(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_deref(), Some(&[0.3f32][..]));
    }
}
