use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::AdamConfig;

/// Environment variable overriding [`TrainConfig::seed`].
pub const SEED_ENV: &str = "OVR_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    /// Uniformly random sources.
    Random,
    /// Ranking by the selector network.
    Learned,
    /// Ranking by ground-truth poses.
    Oracle,
}

impl std::str::FromStr for SelectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "learned" => Ok(Self::Learned),
            "oracle" => Ok(Self::Oracle),
            _ => Err(Error::Config(format!(
                "unknown selector mode {s:?} (expected random, learned or oracle)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub rays_per_iter: usize,
    pub points_per_ray: usize,
    /// Source views aggregated into the origin.
    pub k_views: usize,
    pub seed: u64,
    /// Targets are drawn from this many nearest training views of the
    /// origin; `None` draws from all of them.
    pub target_neighbors: Option<usize>,
    pub selector_mode: SelectorMode,
    /// Weight of the selector regression loss.
    pub selector_weight: f64,
    /// Learning-rate schedule; `decay_steps` is tied to `steps`.
    pub adam: AdamConfig,
    pub model: ModelConfig,
    /// Progress line every this many steps on stderr; 0 disables.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            rays_per_iter: 512,
            points_per_ray: 32,
            k_views: 4,
            seed: 0,
            target_neighbors: Some(4),
            selector_mode: SelectorMode::Learned,
            selector_weight: 1.0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.rays_per_iter == 0 {
            return bad("rays_per_iter must be positive".into());
        }
        if self.points_per_ray < 2 {
            return bad(format!("points_per_ray must be >= 2, got {}", self.points_per_ray));
        }
        if !(self.adam.base_lr > 0.0 && self.adam.base_lr.is_finite()) {
            return bad("adam.base_lr must be positive".into());
        }
        if !(self.selector_weight >= 0.0) {
            return bad("selector_weight must be >= 0".into());
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses TOML or JSON, chosen by file extension.
    pub fn from_str_with_ext(text: &str, ext: &str) -> Result<Self> {
        let cfg: Self = match ext {
            "json" => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            _ => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("toml");
        Self::from_str_with_ext(&text, ext)
    }

    /// Applies `OVR_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Applies `key=value` ablation flags such as `omniview=off`.
    pub fn apply_flags(&mut self, flags: &str) -> Result<()> {
        for flag in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            let (key, value) = flag
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("flag {flag:?} is not key=value")))?;
            let on = || match value {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("flag {key} expects on/off, got {value:?}"))),
            };
            match key {
                "omniview" => self.model.omniview = on()?,
                "film" => self.model.film = on()?,
                "pixel_aligned" => self.model.pixel_aligned = on()?,
                "color_skip" => self.model.color_skip = on()?,
                "selector" | "selector_mode" => self.selector_mode = value.parse()?,
                _ => return Err(Error::Config(format!("unknown ablation flag {key:?}"))),
            }
        }
        self.validate()
    }
}
