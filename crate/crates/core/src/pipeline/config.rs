use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::gaussians::SpawnConfig;
use crate::ggo::GgoConfig;
use crate::losses::LossWeights;
use crate::tensor::Real;
use crate::unet::UnetConfig;

/// Components that can be switched off, named after the ablation rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_warmup: bool,
    pub no_neural: bool,
    pub no_ggo: bool,
    pub no_enhancer: bool,
}

impl Ablation {
    /// Parses a comma-separated list of `warmup`, `neural`, `ggo`, `enhancer`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "warmup" => a.no_warmup = true,
                "neural" => a.no_neural = true,
                "ggo" => a.no_ggo = true,
                "enhancer" => a.no_enhancer = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other:?} (expected warmup, neural, ggo, enhancer)"
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn all() -> Self {
        Self { no_warmup: true, no_neural: true, no_ggo: true, no_enhancer: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub unet: Real,
    pub spawn: Real,
    pub ggo: Real,
    pub enhancer: Real,
    /// Static pseudo-Gaussian fit.
    pub pseudo: Real,
    /// Pseudo-Gaussian positions, in units of the mean edge length.
    pub pseudo_position: Real,
    /// U-nets during warm-up.
    pub warmup: Real,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { unet: 1e-3, spawn: 1e-3, ggo: 1e-4, enhancer: 1e-3, pseudo: 1e-2, pseudo_position: 2e-3, warmup: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub factor: Real,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self { levels: 2, factor: 4.0 }
    }
}

/// Everything that determines a training run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset directory; may be given on the command line instead.
    pub data: Option<String>,
    pub seed: u64,
    pub pseudo_iters: usize,
    pub warmup_iters: usize,
    pub iters: usize,
    /// Trailing frames held out for testing.
    pub test_frames: usize,
    /// Spherical-harmonic degree of generated colors; only 0 (RGB) is supported.
    pub k_sh: usize,
    /// Expected square image side; 0 accepts the dataset's resolution.
    pub resolution: usize,
    /// Predict tracking offsets for evaluated frames too.
    pub ggo_at_test: bool,
    /// Loss-log stride for progress messages (the CSV has every iteration).
    pub log_every: usize,
    pub ablate: Ablation,
    pub lr: LearningRates,
    pub hierarchy: HierarchyConfig,
    pub unet: UnetConfig,
    pub spawn: SpawnConfig,
    pub ggo: GgoConfig,
    pub enhancer: EnhancerConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            seed: 0,
            pseudo_iters: 2000,
            warmup_iters: 10_000,
            iters: 30_000,
            test_frames: 8,
            k_sh: 0,
            resolution: 0,
            ggo_at_test: true,
            log_every: 500,
            ablate: Ablation::default(),
            lr: LearningRates::default(),
            hierarchy: HierarchyConfig::default(),
            unet: UnetConfig::default(),
            spawn: SpawnConfig::default(),
            ggo: GgoConfig::default(),
            enhancer: EnhancerConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be positive".into()));
        }
        if !self.ablate.no_warmup && (self.warmup_iters == 0 || self.pseudo_iters == 0) {
            return Err(Error::Config("warm-up needs positive pseudo_iters and warmup_iters".into()));
        }
        if self.k_sh != 0 {
            return Err(Error::Config(format!("k_sh = {} unsupported: generated colors are RGB (k_sh = 0)", self.k_sh)));
        }
        if self.resolution % 4 != 0 {
            return Err(Error::Config(format!("resolution {} must be divisible by 4", self.resolution)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("unet", lr.unet),
            ("spawn", lr.spawn),
            ("ggo", lr.ggo),
            ("enhancer", lr.enhancer),
            ("pseudo", lr.pseudo),
            ("pseudo_position", lr.pseudo_position),
            ("warmup", lr.warmup),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("learning rate {name} = {v} must be finite and non-negative")));
            }
        }
        self.loss.validate()
    }

    /// Spawn settings with the ablation applied.
    pub fn effective_spawn(&self) -> SpawnConfig {
        let mut s = self.spawn.clone();
        if self.ablate.no_neural {
            s.k = 0;
        }
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
