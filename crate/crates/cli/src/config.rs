//! Experiment configuration loaded from JSON.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use femtocache::data::{Retention, ShotNoiseParams};
use femtocache::proactive::{Architecture, TrainOptions};
use femtocache::solver::SolverOptions;
use femtocache::NetworkConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Stationary Zipf popularity over `data.zipf_files` files.
    Zipf,
    /// Synthetic shot-noise request trace.
    ShotNoise,
    /// An existing `period,file_id` request log.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    pub zipf_exponent: f64,
    /// Catalog size of a generated Zipf series. Samples draw
    /// `network.num_files_f` of these files, so every window position needs
    /// enough test records after the split.
    pub zipf_files: usize,
    /// Length of a generated Zipf series.
    pub zipf_periods: usize,
    pub shot_noise: ShotNoiseParams,
    pub log_path: Option<PathBuf>,
    /// Which files of a request log enter the popularity estimate.
    pub retention: Retention,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::ShotNoise,
            zipf_exponent: 1.0,
            zipf_files: 100,
            zipf_periods: 50,
            shot_noise: ShotNoiseParams::default(),
            log_path: None,
            retention: Retention::MinRequests { min_requests: 10 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Share of records used for training.
    pub train_fraction: f64,
    /// Number of repeat-sampled training samples.
    pub train_samples: usize,
    /// Test samples drawn at each window position.
    pub test_per_period: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            train_samples: 2048,
            test_per_period: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    /// Number of training samples that get a solver label.
    pub label_samples: usize,
    pub epochs: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            label_samples: 256,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Monte-Carlo drops per evaluated policy; 0 disables the simulation.
    pub num_drops: usize,
    pub region_radius: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_drops: 100,
            region_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub num_files: usize,
    pub cache_size: usize,
    pub zipf_exponent: f64,
    pub subbands: Vec<u32>,
    pub num_drops: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            num_files: 10,
            cache_size: 1,
            zipf_exponent: 1.0,
            subbands: vec![1, 2, 4],
            num_drops: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub samples: SampleConfig,
    pub architecture: Architecture,
    /// Training options of both learned strategies; `seed` is replaced by
    /// the run seed.
    pub train: TrainOptions,
    pub supervised: SupervisedConfig,
    pub solver: SolverOptions,
    pub sim: SimConfig,
    pub validation: ValidationConfig,
}

fn field<T>(name: &str, r: femtocache::Result<T>) -> Result<T> {
    r.with_context(|| format!("invalid config field `{name}`"))
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of a malformed field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config field `{path}`: {}", e.inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        field("network", self.network.validate())?;
        field("data.shot_noise", self.data.shot_noise.validate())?;
        field("train", self.train.validate())?;
        field("solver", self.solver.validate())?;
        if !(self.data.zipf_exponent.is_finite() && self.data.zipf_exponent >= 0.0) {
            bail!("invalid config field `data.zipf_exponent`: must be finite and >= 0");
        }
        if self.data.zipf_files < self.network.num_files_f {
            bail!("invalid config field `data.zipf_files`: must be at least network.num_files_f");
        }
        if self.data.zipf_periods <= self.network.window_tau {
            bail!("invalid config field `data.zipf_periods`: must exceed network.window_tau");
        }
        if self.data.source == Source::Log && self.data.log_path.is_none() {
            bail!("invalid config field `data.log_path`: required when data.source is \"log\"");
        }
        match self.data.retention {
            Retention::TopFraction { keep_fraction } if !(keep_fraction > 0.0 && keep_fraction <= 1.0) => {
                bail!("invalid config field `data.retention.keep_fraction`: must lie in (0, 1]")
            }
            _ => {}
        }
        let s = &self.samples;
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            bail!("invalid config field `samples.train_fraction`: must lie in (0, 1)");
        }
        if s.train_samples == 0 || s.test_per_period == 0 {
            bail!("invalid config field `samples`: train_samples and test_per_period must be positive");
        }
        if self.supervised.label_samples == 0 || self.supervised.epochs == 0 {
            bail!("invalid config field `supervised`: label_samples and epochs must be positive");
        }
        if let Some(r) = self.sim.region_radius {
            if !(r.is_finite() && r > 0.0) {
                bail!("invalid config field `sim.region_radius`: must be positive");
            }
        }
        let v = &self.validation;
        if v.num_files == 0 || v.cache_size == 0 || v.cache_size > v.num_files {
            bail!("invalid config field `validation`: need 1 <= cache_size <= num_files");
        }
        if v.subbands.is_empty() || v.subbands.contains(&0) || v.num_drops == 0 {
            bail!("invalid config field `validation`: subbands must be positive and num_drops > 0");
        }
        Ok(())
    }
}
