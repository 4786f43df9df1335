//! Flat `key=value` run configuration. Blank lines and `#` comments are
//! ignored; unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::model::{EncoderConfig, ModelConfig};
use crate::objectives::CommitmentForm;
use crate::quantizer::SelectionKind;
use crate::trainer::TrainConfig;
use crate::Error;

/// Every accepted key, in serialization order.
pub const CONFIG_KEYS: [&str; 20] = [
    "input_dim",
    "hidden_dim",
    "output_dim",
    "depth",
    "m",
    "l",
    "selection",
    "commitment",
    "objective",
    "recon_weight",
    "epochs",
    "batch_size",
    "devices",
    "learning_rate",
    "beta1",
    "beta2",
    "seed",
    "kmeans_iters",
    "data_dir",
    "output_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory to read.
    pub data_dir: Option<PathBuf>,
    /// Directory for checkpoints and indexes.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 64,
                    hidden_dim: 64,
                    output_dim: 32,
                    depth: 2,
                },
                m: 4,
                l: 16,
                selection: SelectionKind::L2,
                commitment: CommitmentForm::Straight,
            },
            train: TrainConfig::default(),
            data_dir: None,
            output_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

impl RunConfig {
    /// Sets one key, validating only its syntax.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let enc = &mut self.model.encoder;
        let t = &mut self.train;
        let result = match key {
            "input_dim" => parse(key, value).map(|v| enc.input_dim = v),
            "hidden_dim" => parse(key, value).map(|v| enc.hidden_dim = v),
            "output_dim" => parse(key, value).map(|v| enc.output_dim = v),
            "depth" => parse(key, value).map(|v| enc.depth = v),
            "m" => parse(key, value).map(|v| self.model.m = v),
            "l" => parse(key, value).map(|v| self.model.l = v),
            "selection" => parse(key, value).map(|v| self.model.selection = v),
            "commitment" => parse(key, value).map(|v| self.model.commitment = v),
            "objective" => parse(key, value).map(|v| t.objective = v),
            "recon_weight" => parse(key, value).map(|v| t.recon_weight = v),
            "epochs" => parse(key, value).map(|v| t.epochs = v),
            "batch_size" => parse(key, value).map(|v| t.batch_size = v),
            "devices" => parse(key, value).map(|v| t.devices = v),
            "learning_rate" => parse(key, value).map(|v| t.learning_rate = v),
            "beta1" => parse(key, value).map(|v| t.adam_betas.0 = v),
            "beta2" => parse(key, value).map(|v| t.adam_betas.1 = v),
            "seed" => parse(key, value).map(|v| t.seed = v),
            "kmeans_iters" => parse(key, value).map(|v| t.kmeans_iters = v),
            "data_dir" => {
                let _: () = self.data_dir = Some(PathBuf::from(value));
                Ok(())
            },
            "output_dir" => {
                let _: () = self.output_dir = Some(PathBuf::from(value));
                Ok(())
            },
            _ => Err(format!("unknown configuration key '{key}'")),
        };
        result.map_err(Error::Config)
    }

    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key '{key}'", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = super::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(&e))))
    }

    pub fn validate(&self) -> Result<(), Error> {
        let checks = self.model.validate().and_then(|()| self.train.validate());
        checks.map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    /// Checks that configured paths exist (data) or can be created (output).
    pub fn check_paths(&self) -> Result<(), Error> {
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data_dir {} is not a directory", dir.display())));
            }
        }
        if let Some(dir) = &self.output_dir {
            let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() && !parent.is_dir() {
                return Err(Error::Config(format!(
                    "output_dir {} has no existing parent directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Model keys only, as stored in checkpoints.
    pub fn model_text(&self) -> String {
        self.to_text_filtered(|k| matches!(k, "input_dim" | "hidden_dim" | "output_dim" | "depth" | "m" | "l" | "selection" | "commitment"))
    }

    pub fn to_text(&self) -> String {
        self.to_text_filtered(|_| true)
    }

    fn to_text_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS.into_iter().filter(|k| keep(k)) {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("{key}={v}\n"));
            }
        }
        out
    }

    /// Current value of `key` as text, if set.
    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.model.encoder;
        let t = &self.train;
        Some(match key {
            "input_dim" => e.input_dim.to_string(),
            "hidden_dim" => e.hidden_dim.to_string(),
            "output_dim" => e.output_dim.to_string(),
            "depth" => e.depth.to_string(),
            "m" => self.model.m.to_string(),
            "l" => self.model.l.to_string(),
            "selection" => self.model.selection.to_string(),
            "commitment" => self.model.commitment.to_string(),
            "objective" => t.objective.to_string(),
            "recon_weight" => t.recon_weight.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "devices" => t.devices.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "beta1" => t.adam_betas.0.to_string(),
            "beta2" => t.adam_betas.1.to_string(),
            "seed" => t.seed.to_string(),
            "kmeans_iters" => t.kmeans_iters.to_string(),
            "data_dir" => self.data_dir.as_ref()?.display().to_string(),
            "output_dir" => self.output_dir.as_ref()?.display().to_string(),
            _ => return None,
        })
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("objective", "dqn").unwrap();
        cfg.set("recon_weight", "0.001").unwrap();
        cfg.set("learning_rate", "0.0005").unwrap();
        cfg.set("data_dir", "/tmp/data").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = RunConfig::parse("# comment\n\nm = 8\nselection=bilinear\n").unwrap();
        assert_eq!(cfg.model.m, 8);
        assert_eq!(cfg.model.selection, SelectionKind::Bilinear);
        assert_eq!(cfg.train.epochs, 20);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        let err = RunConfig::parse("m=4\nbogus=1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(RunConfig::parse("m=4\nm=8\n").is_err());
        assert!(RunConfig::parse("epochs\n").is_err());
        assert!(RunConfig::parse("epochs=-1\n").is_err());
        assert!(RunConfig::parse("selection=manhattan\n").is_err());
    }

    #[test]
    fn validates_semantics() {
        assert!(RunConfig::parse("m=3\n").is_err());
        assert!(RunConfig::parse("objective=dqn\ndevices=2\n").is_err());
    }

    #[test]
    fn path_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data_dir = Some(dir.path().join("missing"));
        assert!(cfg.check_paths().is_err());
        cfg.data_dir = Some(dir.path().to_path_buf());
        cfg.output_dir = Some(dir.path().join("new"));
        cfg.check_paths().unwrap();
        cfg.output_dir = Some(dir.path().join("a/b/c"));
        assert!(cfg.check_paths().is_err());
    }
}
