//! Run configuration: one TOML-serializable struct tying together encoder,
//! mixture, loss, optimizer, and data-generator settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{MoaConfig, RouterMode};
use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::objectives::SdmConfig;
use crate::params::derive_seed;

/// Loss weights: the matching-loss temperature/guard plus the balance
/// penalty weight α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            tau: 0.02,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn sdm(&self) -> SdmConfig {
        SdmConfig {
            tau: self.tau,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        self.sdm().validate()
    }
}

/// Adam settings and loop sizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate (and emit a metrics row) every this many epochs; the final
    /// epoch always evaluates.
    pub eval_every: usize,
    /// Optional absolute cap on optimizer steps — lets a run stop mid-epoch
    /// for step-granular checkpoint/resume checks.
    pub max_steps: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            eval_every: 1,
            max_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. `seed` is the run's single source of randomness:
/// the encoder-init and data-generator seeds are derived from it (see
/// [`RunConfig::derived`]), so the corresponding sub-config fields in a file
/// are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub moa: MoaConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// 64 = plain f64 training; 32 rounds trainable parameter storage
    /// through f32 after init and after every optimizer step (moments stay
    /// f64).
    pub precision: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            moa: MoaConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            precision: 64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.moa.validate(self.backbone.d_model)?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        // The generator and the encoder must agree on input geometry.
        if self.data.image_hw != self.backbone.image_hw {
            return Err(Error::Config(format!(
                "data.image_hw {:?} != backbone.image_hw {:?}",
                self.data.image_hw, self.backbone.image_hw
            )));
        }
        if self.data.channels != self.backbone.channels {
            return Err(Error::Config(format!(
                "data.channels {} != backbone.channels {}",
                self.data.channels, self.backbone.channels
            )));
        }
        if self.data.vocab_size != self.backbone.vocab_size {
            return Err(Error::Config(format!(
                "data.vocab_size {} != backbone.vocab_size {}",
                self.data.vocab_size, self.backbone.vocab_size
            )));
        }
        if self.data.n_attributes + 2 > self.backbone.text_len {
            return Err(Error::Config(format!(
                "captions carry {} tokens plus [BOS]/[EOS], exceeding text_len {}",
                self.data.n_attributes, self.backbone.text_len
            )));
        }
        Ok(())
    }

    /// The canonical form used by training: sub-seeds derived from the run
    /// seed so one integer pins the entire run.
    pub fn derived(&self) -> RunConfig {
        let mut out = self.clone();
        out.backbone.seed = derive_seed(self.seed, "backbone");
        out.data.seed = derive_seed(self.seed, "data");
        out
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut out = self.clone();
        out.seed = seed;
        out
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// Targeted command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_experts: Option<usize>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub router: Option<RouterMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.n_experts {
            cfg.moa.n_experts = n;
        }
        if let Some(k) = self.top_k {
            cfg.moa.top_k = k;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if let Some(r) = self.router {
            cfg.moa.router = r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.moa.n_experts = 4;
        cfg.optim.max_steps = Some(17);
        cfg.precision = 32;
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 7
            [moa]
            n_experts = 4
            top_k = 2
            reduction = 8
            router = "standard"
            prompt_count = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.moa.n_experts, 4);
        assert_eq!(cfg.moa.router, RouterMode::Standard);
        assert_eq!(cfg.optim.epochs, OptimConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("seeed = 7\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seeed") || msg.contains("unknown"), "{msg}");
    }

    #[test]
    fn cross_field_validation_catches_geometry_mismatch() {
        let mut cfg = RunConfig::default();
        cfg.data.image_hw = (16, 16);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("image_hw"));

        let mut cfg = RunConfig::default();
        cfg.data.vocab_size = 32;
        cfg.backbone.vocab_size = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let cfg = RunConfig::default().with_seed(5);
        let d1 = cfg.derived();
        let d2 = cfg.derived();
        assert_eq!(d1, d2);
        assert_ne!(d1.backbone.seed, d1.data.seed);
        let other = RunConfig::default().with_seed(6).derived();
        assert_ne!(d1.backbone.seed, other.backbone.seed);
    }

    #[test]
    fn overrides_touch_only_their_fields() {
        let base = RunConfig::default();
        let mut cfg = base.clone();
        Overrides {
            seed: Some(9),
            n_experts: Some(8),
            top_k: None,
            alpha: Some(0.0),
            router: Some(RouterMode::Standard),
        }
        .apply(&mut cfg);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.moa.n_experts, 8);
        assert_eq!(cfg.moa.top_k, base.moa.top_k);
        assert_eq!(cfg.loss.alpha, 0.0);
        assert_eq!(cfg.moa.router, RouterMode::Standard);
        assert_eq!(cfg.backbone, base.backbone);
        assert_eq!(cfg.data, base.data);
    }

    #[test]
    fn bad_precision_rejected() {
        let mut cfg = RunConfig::default();
        cfg.precision = 16;
        assert!(cfg.validate().is_err());
    }
}
