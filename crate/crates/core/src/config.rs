//! Experiment configuration (one TOML document per run) and mixture presets.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixture::{GaussianMixture, MixtureError};

/// Environment variable that may override the output directory.
pub const OUT_DIR_ENV: &str = "MIXDIFF_OUT";

pub const PRESETS: [&str; 4] = ["symmetric-pair-1d", "two-cluster-2d", "three-cov-3d", "custom"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config schema: {0}")]
    Schema(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(String),
    #[error("unknown preset {name:?}; expected one of {}", PRESETS.join(", "))]
    UnknownPreset { name: String },
    #[error("custom preset requires a [mixture.custom] table")]
    MissingCustom,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomMixture {
    pub alpha: f64,
    pub beta: f64,
    pub radius: f64,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Each covariance as a list of rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl CustomMixture {
    pub fn build(&self) -> Result<GaussianMixture, ConfigError> {
        let means: Vec<DVector<f64>> = self.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
        let mut covs = Vec::with_capacity(self.covariances.len());
        for (i, rows) in self.covariances.iter().enumerate() {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(ConfigError::Schema(format!("covariances[{i}] is not square")));
            }
            covs.push(DMatrix::from_fn(n, n, |a, b| rows[a][b]));
        }
        Ok(GaussianMixture::from_parameters(&means, &covs, self.weights.clone(), self.alpha, self.beta, self.radius)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub preset: Option<String>,
    /// A mixture JSON file, resolved against the config's directory.
    pub path: Option<PathBuf>,
    pub custom: Option<CustomMixture>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub mean_net_step: f64,
    pub max_mean_candidates: usize,
    pub max_mean_tuples: usize,
    pub covariance_net_step: f64,
    pub max_covariance_candidates: usize,
    pub moment_dim_cap: usize,
    pub max_candidates: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            mean_net_step: 0.5,
            max_mean_candidates: 10_000,
            max_mean_tuples: 10_000,
            covariance_net_step: 0.25,
            max_covariance_candidates: 100_000,
            moment_dim_cap: crate::spectral::DEFAULT_MOMENT_DIM_CAP,
            max_candidates: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub horizon: f64,
    pub delta: f64,
    pub steps: usize,
    pub kappa: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdChoice {
    Oracle,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub degree: usize,
    pub ridge: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub thresholds: ThresholdChoice,
    pub slack: f64,
    pub threshold_cap: usize,
    pub threshold_range: f64,
    pub max_tuples: usize,
    pub max_configurations: usize,
    pub boundary_c1: f64,
    pub boundary_c2: f64,
    pub confidence_delta: f64,
}

impl Default for LearnSection {
    fn default() -> Self {
        LearnSection {
            degree: 4,
            ridge: 1e-8,
            n_train: 50_000,
            n_val: 10_000,
            thresholds: ThresholdChoice::Oracle,
            slack: 0.5,
            threshold_cap: 3,
            threshold_range: 2.0,
            max_tuples: 64,
            max_configurations: 20_000,
            boundary_c1: 8.0,
            boundary_c2: 8.0,
            confidence_delta: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RhoChoice {
    #[default]
    Full,
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    #[default]
    Csv,
    Gmms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_samples: usize,
    #[serde(default)]
    pub rho: RhoChoice,
    #[serde(default)]
    pub format: SampleFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Noise times at which a model is learned and its score error measured.
    pub score_times: Vec<f64>,
    pub score_samples: usize,
    pub relative_tolerance: f64,
    pub reference_samples: usize,
    pub projections: usize,
    pub w1_bound: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            score_times: vec![],
            score_samples: 50_000,
            relative_tolerance: 0.05,
            reference_samples: 20_000,
            projections: 64,
            w1_bound: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Use the true parameters as the candidate list.
    #[serde(default)]
    pub oracle: bool,
    pub mixture: MixtureSection,
    pub data: DataSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub learn: LearnSection,
    pub sampler: SamplerSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Schema(e.message().to_string()))?;
        if let Some(p) = &cfg.mixture.path {
            let resolved = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            if !resolved.exists() {
                return Err(ConfigError::MissingPath(resolved.display().to_string()));
            }
            cfg.mixture.path = Some(resolved);
        }
        let sources = [cfg.mixture.preset.is_some(), cfg.mixture.path.is_some()].iter().filter(|b| **b).count();
        if sources != 1 {
            return Err(ConfigError::Schema("[mixture] needs exactly one of `preset` or `path`".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve_mixture(&self) -> Result<GaussianMixture, ConfigError> {
        if let Some(p) = &self.mixture.path {
            return crate::io::read_mixture(p).map_err(|e| ConfigError::Schema(e.to_string()));
        }
        let name = self.mixture.preset.as_deref().unwrap_or_default();
        preset(name, self.mixture.custom.as_ref())
    }

    /// Output directory: the environment override, then the config, then "out".
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Named mixtures.
pub fn preset(name: &str, custom: Option<&CustomMixture>) -> Result<GaussianMixture, ConfigError> {
    let v = |x: &[f64]| DVector::from_column_slice(x);
    let mix = match name {
        "symmetric-pair-1d" => GaussianMixture::from_parameters(
            &[v(&[-4.0]), v(&[4.0])],
            &[DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![0.5, 0.5],
            1.0,
            1.0,
            4.0,
        )?,
        "two-cluster-2d" => GaussianMixture::from_parameters(
            &[v(&[-3.0, 0.0]), v(&[3.0, 0.0])],
            &[DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![0.5, 0.5],
            1.0,
            1.0,
            3.0,
        )?,
        "three-cov-3d" => GaussianMixture::from_parameters(
            &[v(&[0.0, 0.0, 0.0]), v(&[0.0, 0.0, 0.0]), v(&[2.0, 2.0, 0.0])],
            &[
                DMatrix::identity(3, 3),
                DMatrix::identity(3, 3) * 3.0,
                DMatrix::from_diagonal(&v(&[0.5, 0.5, 2.0])),
            ],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            0.5,
            3.0,
            5.0,
        )?,
        "custom" => custom.ok_or(ConfigError::MissingCustom)?.build()?,
        other => return Err(ConfigError::UnknownPreset { name: other.into() }),
    };
    Ok(mix)
}
