//! The flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::metrics::ROUGE_BETA2;
use crate::vq::{TokenizerConfig, TokenizerTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainScheme {
    /// Alignment projection only; backbone frozen.
    Mlp,
    /// Projection and backbone together.
    Joint,
    /// Projection first, then the backbone with the projection frozen.
    Staged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructScheme {
    Llm,
    Joint,
    None,
}

impl PretrainScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "joint" => Ok(Self::Joint),
            "staged" => Ok(Self::Staged),
            _ => Err(Error::Config(format!(
                "unknown pretrain scheme {s:?} (mlp, joint, staged)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Joint => "joint",
            Self::Staged => "staged",
        }
    }
}

impl InstructScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "llm" => Ok(Self::Llm),
            "joint" => Ok(Self::Joint),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown instruct scheme {s:?} (llm, joint, none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Llm => "llm",
            Self::Joint => "joint",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSpec {
    pub pretrain: PretrainScheme,
    pub instruct: InstructScheme,
    pub mlp_lr: f64,
    pub llm_lr: f64,
    pub weight_decay: f64,
    /// Steps per pretraining run; the staged scheme spends this on each phase.
    pub pretrain_steps: usize,
    pub instruct_steps: usize,
    pub batch_size: usize,
    /// Validation evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        SchemeSpec {
            pretrain: PretrainScheme::Joint,
            instruct: InstructScheme::Llm,
            mlp_lr: 2e-4,
            llm_lr: 1e-4,
            weight_decay: 0.0,
            pretrain_steps: 1000,
            instruct_steps: 500,
            batch_size: 8,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub rouge_beta2: f64,
    /// Cap on evaluated samples per split; 0 means all.
    pub max_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_new_tokens: 32,
            rouge_beta2: ROUGE_BETA2,
            max_samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory holding `manifest.jsonl`.
    pub data: PathBuf,
    /// Run directory for checkpoints and logs.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: PathBuf::from("data"),
            run: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub lm: LmConfig,
    pub scheme: SchemeSpec,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data, &mut cfg.paths.run] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        let s = &self.scheme;
        for (name, lr) in [
            ("mlp_lr", s.mlp_lr),
            ("llm_lr", s.llm_lr),
            ("tokenizer_train.lr", self.tokenizer_train.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if s.batch_size == 0 || self.tokenizer_train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let mut lm = self.lm.clone();
        if lm.vocab_size == 0 {
            lm.vocab_size = crate::dataset::MOTION + 1;
        }
        lm.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"sed": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"scheme": {"pretrain": "joint", "lr": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scheme": {"pretrain": "frozen"}}"#).is_err());
    }

    #[test]
    fn default_rates_keep_two_to_one() {
        let s = SchemeSpec::default();
        assert_eq!(s.mlp_lr / s.llm_lr, 2.0);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert_eq!(
            RunConfig::from_json(r#"{"lm": {"n_heads": 3}}"#)
                .unwrap_err()
                .exit_code(),
            2
        );
        assert!(RunConfig::from_json(r#"{"scheme": {"mlp_lr": 0}}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"paths": {"data": "corpus", "run": "/abs/run"}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.paths.data, dir.path().join("corpus"));
        assert_eq!(c.paths.run, PathBuf::from("/abs/run"));
    }
}
