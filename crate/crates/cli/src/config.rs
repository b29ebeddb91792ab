//! Run configuration: one JSON document holding every setting. Command-line
//! flags override the file, which overrides the built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sulcal_ssl::augment::Strategy;
use sulcal_ssl::contrastive::{Representation, TrainConfig};
use sulcal_ssl::nn::HeadKind;
use sulcal_ssl::synth::SynthConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub paths: Paths,
    pub grid: GridAxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Weight of the hinge term against the L2 penalty.
    pub c: f64,
    /// Fraction of each stratum used to fit the probe.
    pub split_frac: f64,
    pub split_seed: u64,
    pub representation: Representation,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c: 1.0,
            split_frac: 0.5,
            split_seed: 0,
            representation: Representation::Latent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
}

/// Values to sweep. Empty axes are not swept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub cutout_frac: Vec<f64>,
    pub clip_frac: Vec<f64>,
    pub dropout_p: Vec<f64>,
    pub latent_dim: Vec<usize>,
    pub head: Vec<HeadKind>,
    pub augment: Vec<Strategy>,
    /// Models trained per cell, with seeds `train.seed + r`.
    pub repeats: usize,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            lr: Vec::new(),
            batch_size: Vec::new(),
            cutout_frac: Vec::new(),
            clip_frac: Vec::new(),
            dropout_p: Vec::new(),
            latent_dim: Vec::new(),
            head: Vec::new(),
            augment: Vec::new(),
            repeats: 1,
        }
    }
}

impl GridAxes {
    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
            && self.batch_size.is_empty()
            && self.cutout_frac.is_empty()
            && self.clip_frac.is_empty()
            && self.dropout_p.is_empty()
            && self.latent_dim.is_empty()
            && self.head.is_empty()
            && self.augment.is_empty()
    }
}

impl RunConfig {
    /// Reads a config file; a missing path gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn corpus(&self) -> Result<&Path, CliError> {
        self.paths.corpus.as_deref().ok_or_else(|| {
            CliError::Usage("missing --corpus (or paths.corpus in the config)".into())
        })
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing --out (or paths.out in the config)".into()))
    }

    pub fn run_id(&self) -> String {
        self.paths
            .run_id
            .clone()
            .unwrap_or_else(|| format!("seed-{}", self.train.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1}}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"train": {"augment": {"size": 1}}}"#).is_err()
        );
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"train": {"tau": 0.2, "augment": {"strategy": "cutout"}}}"#)
                .unwrap();
        assert_eq!(c.train.tau, 0.2);
        assert_eq!(c.train.lr, 4e-4);
        assert!(c.train.augment.keep_bottom);
    }
}
