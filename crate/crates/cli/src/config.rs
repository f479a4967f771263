//! Run configuration: one TOML file covering the simulator, dataset sizes,
//! training preset, model widths, seed and output location.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use procam_core::baseline::BaselineConfig;
use procam_core::simulator::{SimParams, Sources};
use procam_core::training::{ModelConfig, PretrainConfig, Preset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable overriding `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "PROCAM_OUTPUT_ROOT";
/// Environment variable setting the worker thread count.
pub const THREADS_ENV: &str = "PROCAM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Square device resolution; overrides the sizes in `[sim]`.
    pub size: Option<usize>,
    pub output_root: PathBuf,
    pub sim: SimParams,
    pub dataset: DatasetConfig,
    pub train: TrainOverrides,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Full,
            size: None,
            output_root: PathBuf::from("runs"),
            sim: SimParams::default(),
            dataset: DatasetConfig::default(),
            train: TrainOverrides::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Training pairs; when absent, 500 for the full preset and 48 otherwise.
    pub train: Option<usize>,
    pub val: usize,
    /// Directory of PNG sources; procedural textures when absent.
    pub sources: Option<PathBuf>,
    pub source_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: 200,
            sources: None,
            source_seed: 7,
        }
    }
}

/// Training settings that differ from the chosen preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay_at: Option<usize>,
    pub lr_decay_factor: Option<f64>,
    pub weight_decay: Option<f64>,
    pub val_every: Option<usize>,
    pub no_refine: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the serialized configuration.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn sim_params(&self) -> SimParams {
        match self.size {
            Some(s) => self.sim.clone().at_size(s),
            None => self.sim.clone(),
        }
    }

    pub fn n_train(&self) -> usize {
        self.dataset.train.unwrap_or(match self.preset {
            Preset::Full => 500,
            Preset::Fast | Preset::Faster => 48,
        })
    }

    pub fn sources(&self) -> Sources {
        match &self.dataset.sources {
            Some(dir) => Sources::Directory(dir.clone()),
            None => Sources::Procedural {
                seed: self.dataset.source_seed,
            },
        }
    }

    /// The preset's schedule with overrides applied. A preset decay point is moved
    /// to two thirds of an overridden iteration count.
    pub fn train_config(&self) -> TrainConfig {
        let o = &self.train;
        let mut c = TrainConfig::preset(self.preset);
        if let Some(n) = o.iterations {
            c.iterations = n;
            c.lr_decay_at = n * 2 / 3;
        }
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.lr_decay_at = o.lr_decay_at.unwrap_or(c.lr_decay_at);
        c.lr_decay_factor = o.lr_decay_factor.unwrap_or(c.lr_decay_factor);
        c.weight_decay = o.weight_decay.unwrap_or(c.weight_decay);
        c.val_every = o.val_every.unwrap_or(c.val_every);
        c.no_refine = o.no_refine.unwrap_or(false);
        c.seed = self.seed;
        c
    }

    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| self.output_root.clone(), PathBuf::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_hashes_stably() {
        let c = RunConfig {
            size: Some(64),
            preset: Preset::Fast,
            ..RunConfig::default()
        };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_ne!(RunConfig::default().hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = toml::from_str("preset = \"fast\"\nsize = 32\n[train]\niterations = 30\n").unwrap();
        assert_eq!(c.n_train(), 48);
        assert_eq!(c.sim_params().proj_width, 32);
        let t = c.train_config();
        assert_eq!((t.iterations, t.lr_decay_at, t.batch_size), (30, 20, 24));
        assert_eq!(RunConfig::default().n_train(), 500);
    }
}
