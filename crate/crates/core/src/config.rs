//! Run configuration: TOML file, command-line overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron_id::IveMode;
use crate::pruning::DEFAULT_PRUNE_INTERVAL;
use crate::synth::SynthSpec;

/// Input and output locations. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory of `layer_<n>.npy` activation files, or a single file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Frame features for SSL clustering (`T x F`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssl_features: Option<PathBuf>,
    /// Utterance embeddings (`N x F`); when absent the manifest's
    /// `embedding_ref` entries are used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ivectors: Option<PathBuf>,
    /// Directory of `layer_<n>_{w1,b1,w2}.npy` FFN weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lambda_pct: f64,
    pub rho_pct: f64,
    pub k_ssl: usize,
    pub k_ive: usize,
    pub mode: IveMode,
    pub step_dims: usize,
    pub final_dims: usize,
    pub prune_interval: u64,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub standardize: bool,
    pub skip_empty_conditions: bool,
    /// Baseline budget in kept dims per layer; defaults to the protected mask's average.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_avg_dims: Option<f64>,
    /// Write compacted weights for the one-shot protected mask.
    pub write_compacted: bool,
    /// Manifest label column to compare SSL clusters against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssl_label: Option<String>,
    /// Manifest label column to compare i-vector clusters against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ive_label: Option<String>,
    pub paths: Paths,
    /// When present and no activations are given, `pipeline` generates this dataset first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda_pct: 1.0,
            rho_pct: 1.0,
            k_ssl: 3,
            k_ive: 2,
            mode: IveMode::Intersect,
            step_dims: 128,
            final_dims: 512,
            prune_interval: DEFAULT_PRUNE_INTERVAL,
            seed: 0,
            max_iters: 300,
            tol: 1e-4,
            standardize: false,
            skip_empty_conditions: false,
            target_avg_dims: None,
            write_compacted: false,
            ssl_label: None,
            ive_label: None,
            paths: Paths::default(),
            synth: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_pct > 0.0 && self.lambda_pct <= 100.0) {
            return bad(format!("lambda_pct must be in (0, 100], got {}", self.lambda_pct));
        }
        if !(self.rho_pct > 0.0 && self.rho_pct < 100.0) {
            return bad(format!("rho_pct must be in (0, 100), got {}", self.rho_pct));
        }
        if self.k_ssl == 0 || self.k_ive == 0 {
            return bad("k_ssl and k_ive must be at least 1".into());
        }
        if self.step_dims == 0 || self.final_dims == 0 {
            return bad("step_dims and final_dims must be at least 1".into());
        }
        if self.max_iters == 0 || !(self.tol >= 0.0 && self.tol.is_finite()) {
            return bad(format!(
                "max_iters must be positive and tol a finite non-negative number, got {} and {}",
                self.max_iters, self.tol
            ));
        }
        if let Some(t) = self.target_avg_dims {
            if !(t >= 1.0 && t.is_finite()) {
                return bad(format!("target_avg_dims must be at least 1, got {t}"));
            }
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(self.paths.out_dir.as_deref().unwrap_or(Path::new("out")))
    }

    /// Resolved path of a required input.
    pub fn required(&self, value: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config(format!("no {name} path given (flag or [paths] {name})")))
    }

    /// JSON form echoed into every output.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
