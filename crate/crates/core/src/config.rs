//! Run configuration: a TOML document selecting the model (vessel or tree,
//! standard or variational), architecture sizes, schedule, seeds, and data
//! sources. Every field is validated before any compute; `VETTA_SEED`
//! overrides the configured seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opt::OptHyper;
use crate::tree_ae::{TreeAeConfig, TreeTrainConfig};
use crate::vessel_ae::{VesselAeConfig, VesselTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vessel,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ae,
    Vae,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_period: u64,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 20_000,
            batch: 32,
            peak_lr: 3e-4,
            warmup_steps: 500,
            decay_period: 16_000,
            decay_factor: 10.0,
            weight_decay: 0.01,
            log_every: 100,
            checkpoint_every: 2000,
            augment: true,
        }
    }
}

impl TrainSection {
    pub fn hyper(&self) -> OptHyper {
        OptHyper {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            decay_period: self.decay_period,
            decay_factor: self.decay_factor,
            weight_decay: self.weight_decay,
            ..OptHyper::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory of canonical tree JSON files.
    pub dataset: Option<PathBuf>,
    /// Vessel mode: generate this many synthetic arc/helix vessels instead
    /// of reading a dataset.
    pub synthetic_vessels: Option<usize>,
    /// Tree mode, 3-D: the trained first-stage checkpoint that provides
    /// per-edge vessel embeddings.
    pub vessel_checkpoint: Option<PathBuf>,
    /// Vessel crop window in millimeters when cropping from tree polylines.
    pub crop_min_mm: f64,
    pub crop_max_mm: f64,
    /// Arc length at or below which an edge is a skip vessel.
    pub skip_threshold_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub dims: u8,
    #[serde(default)]
    pub vessel: VesselAeConfig,
    #[serde(default = "TreeAeConfig::default_2d")]
    pub tree: TreeAeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: None,
            synthetic_vessels: None,
            vessel_checkpoint: None,
            crop_min_mm: 2.5,
            crop_max_mm: 40.0,
            skip_threshold_mm: 2.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        if let Ok(seed) = std::env::var("VETTA_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("VETTA_SEED=`{seed}` is not an integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.train.steps == 0 || self.train.batch == 0 {
            return Err(Error::Config("train.steps and train.batch must be positive".into()));
        }
        if !(self.train.peak_lr > 0.0 && self.train.peak_lr < 1.0) {
            return Err(Error::Config(format!(
                "train.peak_lr = {} outside (0, 1)",
                self.train.peak_lr
            )));
        }
        if self.train.decay_period == 0 || !(self.train.decay_factor > 1.0) {
            return Err(Error::Config(
                "train.decay_period must be positive and decay_factor > 1".into(),
            ));
        }
        if self.data.crop_min_mm <= 0.0 || self.data.crop_max_mm <= self.data.crop_min_mm {
            return Err(Error::Config("crop window must satisfy 0 < min < max".into()));
        }
        self.vessel.validate()?;
        let mut tree = self.tree.clone();
        tree.dims = self.dims;
        tree.validate()?;
        match self.mode {
            Mode::Vessel => {
                if self.data.dataset.is_none() && self.data.synthetic_vessels.is_none() {
                    return Err(Error::Config(
                        "vessel mode needs data.dataset or data.synthetic_vessels".into(),
                    ));
                }
            }
            Mode::Tree => {
                if self.data.dataset.is_none() {
                    return Err(Error::Config("tree mode needs data.dataset".into()));
                }
                if self.dims == 3 && self.data.vessel_checkpoint.is_none() {
                    return Err(Error::Config(
                        "3-d tree mode needs data.vessel_checkpoint".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Tree model config with the variant and dims applied.
    pub fn tree_config(&self) -> TreeAeConfig {
        let mut cfg = self.tree.clone();
        cfg.dims = self.dims;
        cfg.variational = self.variant == Variant::Vae;
        if self.dims == 3 && cfg.max_nodes < 128 {
            cfg.max_nodes = 128;
        }
        cfg
    }

    pub fn vessel_config(&self) -> VesselAeConfig {
        self.vessel.clone()
    }

    pub fn vessel_train_config(&self) -> VesselTrainConfig {
        VesselTrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            seed: self.seed,
            hyper: self.train.hyper(),
            log_every: self.train.log_every,
        }
    }

    pub fn tree_train_config(&self) -> TreeTrainConfig {
        TreeTrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            seed: self.seed,
            hyper: self.train.hyper(),
            log_every: self.train.log_every,
            augment: self.train.augment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        mode = "tree"
        variant = "ae"
        seed = 7
        dims = 2

        [data]
        dataset = "trees/"
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.mode, Mode::Tree);
        assert_eq!(cfg.train.steps, 20_000);
        assert_eq!(cfg.tree_config().dims, 2);
        assert!(!cfg.tree_config().variational);
    }

    #[test]
    fn vae_variant_switches_variational() {
        let text = MINIMAL.replace("\"ae\"", "\"vae\"");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.tree_config().variational);
    }

    #[test]
    fn rejects_bad_fields() {
        let bad_dims = MINIMAL.replace("dims = 2", "dims = 4");
        assert!(RunConfig::from_toml(&bad_dims).is_err());

        let text = r#"
            mode = "tree"
            variant = "ae"
            seed = 1
            dims = 2
            [train]
            peak_lr = 2.0
            [data]
            dataset = "x"
        "#;
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))));

        // tree mode without a dataset
        let text = r#"
            mode = "tree"
            variant = "ae"
            seed = 1
            dims = 2
        "#;
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn env_seed_overrides_config() {
        // temp-env style: set, parse, unset
        std::env::set_var("VETTA_SEED", "991");
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        std::env::remove_var("VETTA_SEED");
        assert_eq!(cfg.seed, 991);
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.train.steps, cfg.train.steps);
    }
}
