//! Run configuration: one TOML document drives training, sampling, and
//! experiments, and is embedded verbatim in checkpoints so a run can be
//! reconstructed from its artifacts alone.

use crate::backbone::{BackboneConfig, StreamKind};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::flow::ClockSchedule;
use crate::optim::OptimizerKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which low-pass basis builds frequency targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Jointly trained filter and gates.
    Learned,
    /// Fixed orthonormal Haar filter.
    Haar,
    /// Fixed binomial pyramid.
    Laplacian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            depth: 3,
            heads: 4,
            patch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletConfig {
    pub basis: BasisKind,
    pub filter_len: usize,
    /// Low-frequency target resolution (s×s before reconstruction).
    pub target_s: usize,
    pub init_gamma: f64,
    pub sharpness: f64,
    pub lambda_sum: f64,
    pub lambda_hp: f64,
    pub lambda_ortho: f64,
    pub lambda_sparse: f64,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig {
            basis: BasisKind::Learned,
            filter_len: 4,
            target_s: 4,
            init_gamma: 1e-3,
            sharpness: 10.0,
            lambda_sum: 1.0,
            lambda_hp: 1.0,
            lambda_ortho: 1.0,
            lambda_sparse: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub enabled: bool,
    pub schedule: ClockSchedule,
    pub lambda: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            enabled: true,
            schedule: ClockSchedule::LinearOffset { delta: 0.25 },
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamsConfig {
    pub dino: StreamConfig,
    pub fre: StreamConfig,
    /// Pixel-stream loss weight; the pixel stream itself is always on and
    /// always runs on the identity clock.
    pub lambda_pix: f64,
}

impl Default for StreamsConfig {
    fn default() -> Self {
        StreamsConfig {
            dino: StreamConfig {
                enabled: false,
                ..StreamConfig::default()
            },
            fre: StreamConfig::default(),
            lambda_pix: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_clip: f64,
    pub class_dropout: f64,
    /// Fraction of total steps after which the auxiliary-target encoder is
    /// snapshotted and frozen.
    pub freeze_frac: f64,
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Ablation: draw each stream's clock from its own uniform instead of
    /// one shared draw.
    pub independent_clocks: bool,
    /// Ablation: replace the image-derived auxiliary targets with fixed
    /// per-example random latents.
    pub random_aux_latent: bool,
    /// Down-weight the frequency loss late in its clock by (1 − τ).
    pub fre_loss_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_clip: 0.05,
            class_dropout: 0.1,
            freeze_frac: 0.1,
            eval_every: 250,
            eval_batch: 16,
            independent_clocks: false,
            random_aux_latent: false,
            fre_loss_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 64,
            cfg_scale: 1.5,
        }
    }
}

/// The complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Quadratic learning-rate decay to zero over the run.
    pub lr_decay: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub wavelet: WaveletConfig,
    pub streams: StreamsConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr: 0.02,
            lr_decay: false,
            grad_clip: 5.0,
            optimizer: OptimizerKind::default(),
            model: ModelConfig::default(),
            data: DataConfig::BlocksAndEdges { image_hw: 16 },
            wavelet: WaveletConfig::default(),
            streams: StreamsConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0 (0 disables), got {}",
                self.grad_clip
            )));
        }
        if !(self.train.t_clip > 0.0 && self.train.t_clip < 1.0) {
            return Err(Error::Config(format!(
                "t_clip must lie in (0, 1), got {}",
                self.train.t_clip
            )));
        }
        if !(0.0..1.0).contains(&self.train.class_dropout) {
            return Err(Error::Config(format!(
                "class_dropout must lie in [0, 1), got {}",
                self.train.class_dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.train.freeze_frac) {
            return Err(Error::Config(format!(
                "freeze_frac must lie in [0, 1], got {}",
                self.train.freeze_frac
            )));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        if self.sample.cfg_scale < 0.0 {
            return Err(Error::Config(format!(
                "cfg_scale must be nonnegative, got {}",
                self.sample.cfg_scale
            )));
        }
        self.streams.dino.schedule.validate()?;
        self.streams.fre.schedule.validate()?;
        let hw = self.data.image_hw();
        if hw % self.model.patch != 0 {
            return Err(Error::Config(format!(
                "image size {hw} not divisible by patch {}",
                self.model.patch
            )));
        }
        let s = self.wavelet.target_s;
        if s == 0 || hw % s != 0 || !(hw / s).is_power_of_two() {
            return Err(Error::Config(format!(
                "image size {hw} cannot reach wavelet target {s} by repeated halving"
            )));
        }
        if self.wavelet.filter_len < 2 || self.wavelet.filter_len % 2 != 0 {
            return Err(Error::Config(format!(
                "wavelet filter length must be even and >= 2, got {}",
                self.wavelet.filter_len
            )));
        }
        if self.wavelet.init_gamma < 0.0 || self.wavelet.sharpness <= 0.0 {
            return Err(Error::Config(
                "wavelet init_gamma must be >= 0 and sharpness > 0".into(),
            ));
        }
        Ok(())
    }

    /// Active streams in canonical order.
    pub fn active_streams(&self) -> Vec<StreamKind> {
        let mut v = Vec::new();
        if self.streams.dino.enabled {
            v.push(StreamKind::Dino);
        }
        if self.streams.fre.enabled {
            v.push(StreamKind::Fre);
        }
        v.push(StreamKind::Pix);
        v
    }

    /// Clock schedule per active stream (pixel = identity clock).
    pub fn stream_schedules(&self) -> Vec<ClockSchedule> {
        self.active_streams()
            .iter()
            .map(|s| match s {
                StreamKind::Dino => self.streams.dino.schedule,
                StreamKind::Fre => self.streams.fre.schedule,
                StreamKind::Pix => ClockSchedule::Synchronous,
            })
            .collect()
    }

    /// Loss weight per active stream.
    pub fn stream_lambdas(&self) -> Vec<f64> {
        self.active_streams()
            .iter()
            .map(|s| match s {
                StreamKind::Dino => self.streams.dino.lambda,
                StreamKind::Fre => self.streams.fre.lambda,
                StreamKind::Pix => self.streams.lambda_pix,
            })
            .collect()
    }

    pub fn backbone_config(&self, channels: usize, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            width: self.model.width,
            depth: self.model.depth,
            heads: self.model.heads,
            patch: self.model.patch,
            image_hw: self.data.image_hw(),
            channels,
            num_classes,
            streams: self.active_streams(),
        }
    }

    /// Absolute step at which the auxiliary-target encoder freezes.
    pub fn freeze_step(&self) -> usize {
        (self.steps as f64 * self.train.freeze_frac).round() as usize
    }

    pub fn grad_clip_opt(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    /// Packet depth implied by the geometry.
    pub fn wavelet_levels(&self) -> usize {
        (self.data.image_hw() / self.wavelet.target_s).trailing_zeros() as usize
    }
}

/// Stable sub-seeds for the independent random streams of a run.
pub mod seeds {
    /// Model parameter initialization.
    pub fn init(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1)
    }
    /// Training-loop draws: example indices, times, noise, dropout.
    pub fn train(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2)
    }
    /// Held-out evaluation noise and times.
    pub fn eval(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3)
    }
    /// Fixed per-example random latents for the ablation.
    pub fn aux_random(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(4)
    }
    /// Sampling noise.
    pub fn sample(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(5)
    }
}
