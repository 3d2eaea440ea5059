//! Run configuration: built-in defaults, then a JSON file, then flag
//! overrides. Unknown keys are errors so a typo never silently falls back to
//! a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::eval::{AblationSpec, Method};
use crate::losses::TranslationMode;
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{key}` in {path}")]
    UnknownKey { key: String, path: String },
    #[error("invalid config {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config file not found: {0}")]
    NotFound(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Inference and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out domain-1 images scored by `evaluate`.
    pub test_images: usize,
    pub num_samples: usize,
    pub sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_images: 100,
            num_samples: 5,
            sigma: 1.0,
        }
    }
}

/// Ablation grid settings; data and training settings come from the
/// enclosing [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub modes: Vec<TranslationMode>,
    pub seeds: Vec<u64>,
    pub vaegan_steps: Option<usize>,
    pub translator_steps: Option<usize>,
    pub baseline_steps: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let s = AblationSpec::default();
        Self {
            methods: s.methods,
            fractions: s.fractions,
            modes: s.modes,
            seeds: s.seeds,
            vaegan_steps: None,
            translator_steps: None,
            baseline_steps: None,
        }
    }
}

/// Everything one command needs, resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the file or default value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub pairs_fraction: Option<f64>,
    pub mode: Option<TranslationMode>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda_f: Option<f64>,
    pub lambda_fm: Option<f64>,
    pub lambda_kl: Option<f64>,
    pub max_steps: Option<usize>,
    pub num_samples: Option<usize>,
    pub sigma: Option<f64>,
}

/// Short stable digest of any serializable value.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

impl RunConfig {
    /// Parses a JSON config; absent keys keep their defaults.
    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            match unknown_key(&message) {
                Some(key) => ConfigError::UnknownKey {
                    key,
                    path: path.to_string(),
                },
                None => ConfigError::Invalid {
                    path: path.to_string(),
                    message,
                },
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        if !path.is_file() {
            return Err(ConfigError::NotFound(shown));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        Self::from_json(&text, &shown)
    }

    /// Defaults, then `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, ConfigError> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(flags)?;
        c.check()?;
        Ok(c)
    }

    fn apply(&mut self, f: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = f.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
        if let Some(fr) = f.pairs_fraction {
            if !(fr > 0.0 && fr <= 1.0) {
                return Err(self.invalid(format!("--pairs-fraction must lie in (0, 1], got {fr}")));
            }
            self.data.n_paired = (fr * self.data.n1.min(self.data.n2) as f64).round() as usize;
            self.ablation.fractions = vec![fr];
        }
        if let Some(m) = f.mode {
            self.train.mode = m;
            self.ablation.modes = vec![m];
        }
        let t = &mut self.train;
        t.learning_rate = f.learning_rate.unwrap_or(t.learning_rate);
        t.batch_size = f.batch_size.unwrap_or(t.batch_size);
        t.lambda_f = f.lambda_f.unwrap_or(t.lambda_f);
        t.lambda_fm = f.lambda_fm.unwrap_or(t.lambda_fm);
        t.lambda_kl = f.lambda_kl.unwrap_or(t.lambda_kl);
        if f.max_steps.is_some() {
            t.max_steps = f.max_steps;
        }
        self.eval.num_samples = f.num_samples.unwrap_or(self.eval.num_samples);
        self.eval.sigma = f.sigma.unwrap_or(self.eval.sigma);
        Ok(())
    }

    fn invalid(&self, message: String) -> ConfigError {
        ConfigError::Invalid {
            path: "<flags>".into(),
            message,
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| self.invalid(e.to_string()))?;
        if self.eval.num_samples == 0 {
            return Err(self.invalid("num_samples must be >= 1".into()));
        }
        if !(self.eval.sigma >= 0.0) {
            return Err(self.invalid("sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// The resolved config with its hash, as written next to every output.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            config_hash: String,
            config: &'a RunConfig,
        }
        serde_json::to_string_pretty(&Echo {
            config_hash: self.hash(),
            config: self,
        })
        .expect("config serializes")
    }

    pub fn ablation_spec(&self) -> AblationSpec {
        let a = &self.ablation;
        AblationSpec {
            data: self.data.clone(),
            train: self.train.clone(),
            methods: a.methods.clone(),
            fractions: a.fractions.clone(),
            modes: a.modes.clone(),
            seeds: a.seeds.clone(),
            test_images: self.eval.test_images,
            vaegan_steps: a.vaegan_steps,
            translator_steps: a.translator_steps,
            baseline_steps: a.baseline_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_json("{}", "cfg.json").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!((c.train.beta1, c.train.beta2), (0.5, 0.999));
        assert_eq!((c.train.lambda_f, c.train.lambda_fm), (60.0, 10.0));
    }

    #[test]
    fn typo_is_an_unknown_key() {
        let err = RunConfig::from_json(r#"{"train": {"lamda_f": 3}}"#, "cfg.json").unwrap_err();
        match err {
            ConfigError::UnknownKey { key, .. } => assert_eq!(key, "lamda_f"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            RunConfig::from_json(r#"{"trian": {}}"#, "x"),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn type_mismatch_is_invalid() {
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"lambda_f": "high"}}"#, "x"),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_json(r#"{"train": {"lambda_f": 45}}"#, "x").unwrap();
        c.apply(&Overrides {
            lambda_f: Some(30.0),
            seed: Some(7),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.train.lambda_f, 30.0);
        assert_eq!((c.train.seed, c.data.seed), (7, 7));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.lambda_f = 1.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
