//! JSON run configuration. Every key has a default, so `{}` is a valid
//! document; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{KnockoutConfig, SyntheticKind};
use crate::distributions::LatentFamily;
use crate::encoders::EncoderKind;
use crate::error::{ModelError, Result};
use crate::model::{HeadKind, ModelConfig, ModelKind};
use crate::ode::SolverConfig;
use crate::scfea::ScfeaConfig;
use crate::train::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub solver: SolverConfig,
    pub data: DataSection,
    pub scfea: ScfeaConfig,
    pub knockout: KnockoutConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// np, nodep, snodep or snodep_gruode; derived from `encoder` when absent
    pub kind: Option<ModelKind>,
    /// mean, lstm or gruode; must agree with `kind` when both are set
    pub encoder: Option<EncoderKind>,
    /// poisson or gaussian; inferred from the data when absent
    pub head: Option<HeadKind>,
    pub latent_family: LatentFamily,
    pub d_r: usize,
    pub d_z: usize,
    pub d_d: usize,
    pub hidden: usize,
    pub append_time: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: None,
            encoder: None,
            head: None,
            latent_family: LatentFamily::Normal,
            d_r: 64,
            d_z: 32,
            d_d: 32,
            hidden: 64,
            append_time: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// falls back to `eval.frequency`
    pub frequency: Option<f64>,
    pub kl_weight: f64,
    pub context_len: usize,
    pub target_len: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            frequency: None,
            kl_weight: t.kl_weight,
            context_len: t.context_len,
            target_len: t.target_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// synthetic generator settings
    pub kind: SyntheticKind,
    pub d_y: usize,
    pub timesteps: usize,
    pub cells: usize,
    /// timesteps used for normalisation statistics; all when absent
    pub normalize_window: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Poisson,
            d_y: 4,
            timesteps: 16,
            cells: 200,
            normalize_window: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ModelError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kind()?;
        self.eval.validate()?;
        self.solver
            .validate()
            .map_err(|e| ModelError::config("solver", e.to_string()))?;
        self.train_config(0).validate()?;
        self.scfea.validate().map_err(|e| ModelError::config("scfea", e))?;
        Ok(())
    }

    /// Resolves `model.kind` against `model.encoder`.
    pub fn model_kind(&self) -> Result<ModelKind> {
        let m = &self.model;
        match (m.kind, m.encoder) {
            (Some(k), Some(e)) if k.encoder_kind() != e => Err(ModelError::config(
                "model.encoder",
                format!("{k} uses the {:?} encoder, not {e:?}", k.encoder_kind()),
            )),
            (Some(k), _) => Ok(k),
            (None, Some(EncoderKind::Mean)) => Ok(ModelKind::Nodep),
            (None, Some(EncoderKind::Lstm)) => Ok(ModelKind::Snodep),
            (None, Some(EncoderKind::GruOde)) => Ok(ModelKind::SnodepGruode),
            (None, None) => Ok(ModelKind::Snodep),
        }
    }

    /// Model settings for data with `d_y` features; `counts` selects the
    /// default head when none is configured.
    pub fn model_config(&self, d_y: usize, counts: bool) -> Result<ModelConfig> {
        let m = &self.model;
        let head = m.head.unwrap_or(if counts { HeadKind::Poisson } else { HeadKind::Gaussian });
        let cfg = ModelConfig {
            kind: self.model_kind()?,
            head,
            latent_family: m.latent_family,
            d_y,
            d_r: m.d_r,
            d_z: m.d_z,
            d_d: m.d_d,
            hidden: m.hidden,
            append_time: m.append_time,
            solver: self.solver,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            seed,
            frequency: t.frequency.unwrap_or(self.eval.frequency),
            kl_weight: t.kl_weight,
            context_len: t.context_len,
            target_len: t.target_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model_kind().unwrap(), ModelKind::Snodep);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        let err = RunConfig::from_json(r#"{"train": {"step": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("step"), "{err}");
    }

    #[test]
    fn encoder_selects_kind_and_conflicts_are_caught() {
        let c = RunConfig::from_json(r#"{"model": {"encoder": "gruode"}, "eval": {"frequency": 0.4}}"#).unwrap();
        assert_eq!(c.model_kind().unwrap(), ModelKind::SnodepGruode);
        assert_eq!(c.train_config(1).frequency, 0.4);
        let err = RunConfig::from_json(r#"{"model": {"kind": "np", "encoder": "lstm"}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Config { ref key, .. } if key == "model.encoder"));
    }

    #[test]
    fn head_follows_data_unless_set() {
        let c = RunConfig::default();
        assert_eq!(c.model_config(3, true).unwrap().head, HeadKind::Poisson);
        assert_eq!(c.model_config(3, false).unwrap().head, HeadKind::Gaussian);
        let c = RunConfig::from_json(r#"{"model": {"head": "gaussian"}}"#).unwrap();
        assert_eq!(c.model_config(3, true).unwrap().head, HeadKind::Gaussian);
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = RunConfig::from_json(r#"{"train": {"context_len": 13}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Config { ref key, .. } if key == "train.context_len"), "{err}");
        let err = RunConfig::from_json(r#"{"eval": {"frequency": 0.0}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Config { ref key, .. } if key == "eval.frequency"), "{err}");
    }
}
