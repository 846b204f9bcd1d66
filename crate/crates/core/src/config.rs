//! The single run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{supported_languages, DatasetConfig, Lexicon, Split};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexiconConfig {
    pub num_classes: usize,
    pub languages: Vec<String>,
    pub seed: u64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig {
            num_classes: 20,
            languages: vec!["en".into(), "zh".into(), "es".into()],
            seed: 7,
        }
    }
}

impl LexiconConfig {
    pub fn build(&self) -> Result<Lexicon> {
        Lexicon::build(self.num_classes, &self.languages, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Entries listed per query in the result log.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::OodEval,
            top_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub calibration_split: Split,
    pub calibration_samples: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            calibration_split: Split::Train,
            calibration_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Each seed sets both the init and the sampler seed of one run.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub lexicon: LexiconConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub quantize: QuantConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            lexicon: LexiconConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            quantize: QuantConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::fsio::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not utf-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let known = supported_languages();
        if let Some(l) = self
            .lexicon
            .languages
            .iter()
            .find(|l| !known.contains(&l.as_str()))
        {
            return Err(Error::UnknownLanguage(l.clone()));
        }
        self.dataset.styles.validate()?;
        self.train.validate()?;
        if self.dataset.canvas != self.train.model.canvas {
            return Err(Error::Config(format!(
                "dataset canvas {:?} differs from model canvas {:?}",
                self.dataset.canvas, self.train.model.canvas
            )));
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be >= 1".into()));
        }
        if self.quantize.calibration_samples < crate::quantsim::MIN_CALIBRATION {
            return Err(Error::Config(format!(
                "quantize.calibration_samples must be >= {}",
                crate::quantsim::MIN_CALIBRATION
            )));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.train.loss.lambda, 0.5);
        assert_eq!(cfg.train.model.embed_dim(), 32);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"init_seed": 3}}"#).unwrap();
        assert_eq!(cfg.train.init_seed, 3);
        assert_eq!(cfg.lexicon, LexiconConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"lexicon": {"classes": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn contradictions_are_rejected() {
        let r = RunConfig::from_json(
            r#"{"train": {"terms": {"v2t": false, "t2v": false, "inv": false}}}"#,
        );
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"lexicon": {"languages": ["xx"]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"top_k": 0}}"#).is_err());
    }
}
