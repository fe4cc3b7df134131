//! The JSON run configuration shared by every pipeline step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::InferencePolicy;
use crate::ar::ArConfig;
use crate::dataset::{generate_synthetic_range, load_ppm_dir, Dataset};
use crate::error::{Result, StatError};
use crate::losses::LossWeights;
use crate::model::TokenizerConfig;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_eval: usize,
    /// Generator index of the first held-out image.
    pub eval_offset: u64,
    /// PPM directory used for training instead of the synthetic corpus.
    pub train_dir: Option<PathBuf>,
    /// PPM directory used for evaluation instead of held-out synthetic images.
    pub eval_dir: Option<PathBuf>,
    /// Class subset the AR model is trained on; all classes when absent.
    pub ar_classes: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            num_classes: 10,
            num_train: 2000,
            num_eval: 512,
            eval_offset: 1_000_000,
            train_dir: None,
            eval_dir: None,
            ar_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub policy: String,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            policy: "threshold:0.5".into(),
            batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn policy(&self) -> Result<InferencePolicy> {
        self.policy.parse()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub losses: LossWeights,
    pub trainer: TrainerConfig,
    pub ar: ArConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates a config; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut c: RunConfig =
            serde_json::from_str(text).map_err(|e| StatError::Config(e.to_string()))?;
        for p in [&mut c.data.train_dir, &mut c.data.eval_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StatError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.losses.validate()?;
        self.trainer.validate(self.tokenizer.latent_len)?;
        self.ar.validate()?;
        let d = &self.data;
        if d.num_classes == 0 {
            return Err(StatError::Config(
                "data.num_classes must be positive".into(),
            ));
        }
        if d.train_dir.is_none() && d.num_train < d.num_classes {
            return Err(StatError::Config(format!(
                "data.num_train {} is below data.num_classes {}",
                d.num_train, d.num_classes
            )));
        }
        if d.eval_dir.is_none() && d.num_eval < d.num_classes {
            return Err(StatError::Config(format!(
                "data.num_eval {} is below data.num_classes {}",
                d.num_eval, d.num_classes
            )));
        }
        if let Some(cs) = &d.ar_classes {
            if cs.is_empty() || cs.iter().any(|&c| c >= d.num_classes) {
                return Err(StatError::Config(format!(
                    "data.ar_classes must be a non-empty subset of 0..{}",
                    d.num_classes
                )));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(StatError::Config("eval.batch_size must be positive".into()));
        }
        let policy = self
            .eval
            .policy()
            .map_err(|e| StatError::Config(format!("eval.policy: {e}")))?;
        policy
            .validate(self.tokenizer.latent_len)
            .map_err(|e| StatError::Config(format!("eval.policy: {e}")))
    }

    /// Training images: the PPM directory when set, else synthetic samples `0..num_train`.
    pub fn train_set(&self) -> Result<Dataset> {
        self.load_set(self.data.train_dir.as_deref(), 0, self.data.num_train)
    }

    /// Held-out images: the PPM directory when set, else synthetic samples
    /// starting at `eval_offset`.
    pub fn eval_set(&self) -> Result<Dataset> {
        self.load_set(
            self.data.eval_dir.as_deref(),
            self.data.eval_offset,
            self.data.num_eval,
        )
    }

    fn load_set(&self, dir: Option<&Path>, first: u64, n: usize) -> Result<Dataset> {
        let t = &self.tokenizer;
        let data = match dir {
            Some(d) => load_ppm_dir(d)?,
            None => generate_synthetic_range(
                self.data.seed,
                first,
                n,
                t.image_size,
                self.data.num_classes,
                t.patch_size,
            )?,
        };
        if data.height != t.image_size || data.width != t.image_size {
            return Err(StatError::Geometry(format!(
                "images are {}x{}, tokenizer.image_size is {}",
                data.height, data.width, t.image_size
            )));
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("/")).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}", Path::new("/")).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            r#"{"foo": 1}"#,
            r#"{"trainer": {"foo": 1}}"#,
            r#"{"tokenizer": {"foo": 1}}"#,
        ] {
            let err = RunConfig::from_json(text, Path::new(".")).unwrap_err();
            assert!(matches!(err, StatError::Config(_)));
            assert!(err.to_string().contains("`foo`"), "{err}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let c = RunConfig::from_json(
            r#"{"data": {"train_dir": "imgs", "eval_dir": "/abs"}}"#,
            Path::new("/runs/a"),
        )
        .unwrap();
        assert_eq!(c.data.train_dir.unwrap(), PathBuf::from("/runs/a/imgs"));
        assert_eq!(c.data.eval_dir.unwrap(), PathBuf::from("/abs"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"eval": {"policy": "fixed:17"}}"#,
            r#"{"eval": {"policy": "bogus"}}"#,
            r#"{"data": {"ar_classes": [10]}}"#,
            r#"{"tokenizer": {"image_size": 30}}"#,
            r#"{"losses": {"p_star": 1.5}}"#,
        ] {
            let err = RunConfig::from_json(text, Path::new(".")).unwrap_err();
            assert!(matches!(err, StatError::Config(_)), "{text}: {err}");
        }
    }
}
