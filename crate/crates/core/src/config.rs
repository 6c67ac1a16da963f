//! Run configuration: one TOML document with a section per pipeline stage,
//! explicit defaults and environment overrides.
//!
//! Overrides use the `CEM_` prefix with `__` between path segments, e.g.
//! `CEM_PERSONALIZE__LAMBDA_ATTN=0.05` or `CEM_PERSONALIZE__CRF__N_ITERS=3`.
//! Values are parsed as TOML literals and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::personalize::PersonalizationConfig;
use crate::scene::CorpusSpec;

pub const ENV_PREFIX: &str = "CEM_";

/// Prompt protocol for similarity and diversity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Prompt templates; `{}` marks the concept placeholder.
    pub templates: Vec<String>,
    pub seeds: Vec<u64>,
    /// Respaced sampler steps per image.
    pub sample_steps: usize,
    /// Timesteps averaged when locating the concept in a generated image.
    pub region_timesteps: usize,
    pub threshold: f64,
    /// Never-trained placeholder used as the random-token comparator.
    pub random_placeholder: String,
    pub smoothing_window: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        let templates = [
            "a photo of a {}",
            "an image of a {}",
            "a picture of the {}",
            "the photo of a {}",
            "a {}",
            "the {}",
            "a photo of a {} on a solid background",
            "an image of a {} on a dots background",
            "a picture of the {} on the stripes background",
            "a photo of a {} over a solid background",
        ];
        Self {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0, 1, 2, 3],
            sample_steps: 50,
            region_timesteps: 10,
            threshold: 0.5,
            random_placeholder: "[v8]".into(),
            smoothing_window: 3,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.iter().any(|t| t.matches("{}").count() != 1) {
            return Err(Error::Config("every eval template needs exactly one `{}`".into()));
        }
        if self.sample_steps == 0 || self.region_timesteps == 0 || self.smoothing_window == 0 {
            return Err(Error::Config("sample_steps, region_timesteps and smoothing_window must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("eval threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn prompt(&self, template: usize, placeholder: &str) -> String {
        self.templates[template].replace("{}", placeholder)
    }
}

/// Which held-out scenes are personalized and what else runs per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesSpec {
    /// Number of held-out scenes to personalize, taken in order.
    pub count: usize,
    /// Also run the fixed-mask comparator on every scene.
    pub baseline: bool,
    /// Fine-tune, sample and score the comparator too, not only its masks.
    pub baseline_generation: bool,
}

impl Default for ScenesSpec {
    fn default() -> Self {
        Self { count: 2, baseline: true, baseline_generation: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub personalize: PersonalizationConfig,
    pub eval: EvalSpec,
    pub scenes: ScenesSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            personalize: PersonalizationConfig::default(),
            eval: EvalSpec::default(),
            scenes: ScenesSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.personalize.validate()?;
        self.eval.validate()?;
        if self.corpus.image_size != self.model.image_size {
            return Err(Error::Config("corpus.image_size and model.image_size differ".into()));
        }
        if self.scenes.count > self.corpus.heldout_size {
            return Err(Error::Config("scenes.count exceeds corpus.heldout_size".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), applies `overrides`, validates.
    pub fn load(path: Option<&Path>, overrides: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let base = match path {
            Some(p) if !p.exists() => return Err(Error::MissingInput(p.to_path_buf())),
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `(KEY, value)` pairs whose key starts with the env prefix.
    pub fn with_overrides(&self, overrides: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        // Round-trip through text: integer map keys only survive as strings.
        let mut doc = toml::Value::Table(toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?);
        let mut touched = false;
        for (key, raw) in overrides {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut doc, &path, parse_value(&raw)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        Self::from_toml(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Content hash of selected sections, used to stamp stage outputs.
    pub fn section_hash(parts: &[&dyn erased::Hashable]) -> Result<String> {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.json()?.as_bytes());
            h.update([0u8]);
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub mod erased {
    use crate::error::Result;

    /// Object-safe access to a value's canonical JSON.
    pub trait Hashable {
        fn json(&self) -> Result<String>;
    }

    impl<T: serde::Serialize> Hashable for T {
        fn json(&self) -> Result<String> {
            Ok(serde_json::to_string(self)?)
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, path: &[String], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = doc;
    for seg in parents {
        cur = cur.get_mut(seg.as_str()).ok_or_else(|| format!("unknown section `{seg}`"))?;
    }
    let table = cur.as_table_mut().ok_or("not a section")?;
    let slot = table.get_mut(last.as_str()).ok_or_else(|| format!("unknown key `{last}`"))?;
    // Keep float fields float when the override is written as an integer.
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalize::Cadence;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(text.contains("lambda_attn") && text.contains("[personalize.crf]"));
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[personalize]\nstage2_steps = 10\nmask_update_every = \"never\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.personalize.stage2_steps, 10);
        assert_eq!(c.personalize.mask_update_every, Cadence::Never);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        assert!(matches!(RunConfig::from_toml("[personalize]\nlambda = 1.0\n"), Err(Error::Config(_))));
        let err = RunConfig::default().with_overrides(env(&[("CEM_PERSONALIZE__NOPE", "1")]));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn env_overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(env(&[
                ("CEM_PERSONALIZE__LAMBDA_ATTN", "1"),
                ("CEM_PERSONALIZE__CRF__N_ITERS", "3"),
                ("CEM_PERSONALIZE__MASK_UPDATE_EVERY", "never"),
                ("CEM_OUT", "/tmp/x"),
                ("CEM_EVAL__SEEDS", "[5, 6]"),
                ("HOME", "/root"),
            ]))
            .unwrap();
        assert_eq!(c.personalize.lambda_attn, 1.0);
        assert_eq!(c.personalize.crf.n_iters, 3);
        assert_eq!(c.personalize.mask_update_every, Cadence::Never);
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert_eq!(c.eval.seeds, vec![5, 6]);
        assert!(RunConfig::default().with_overrides(env(&[("CEM_SEED", "abc")])).is_err());
    }

    #[test]
    fn validation_catches_inconsistency() {
        let mut c = RunConfig::default();
        c.model.image_size = 16;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.templates.push("no placeholder".into());
        assert!(c.validate().is_err());
        assert!(matches!(RunConfig::load(Some(Path::new("/nonexistent.toml")), vec![]), Err(Error::MissingInput(_))));
    }

    #[test]
    fn section_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(RunConfig::section_hash(&[&a.model]).unwrap(), RunConfig::section_hash(&[&b.model]).unwrap());
        b.model.cond_dim = 32;
        assert_ne!(RunConfig::section_hash(&[&a.model]).unwrap(), RunConfig::section_hash(&[&b.model]).unwrap());
    }
}
