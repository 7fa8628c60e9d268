//! Flat key=value run configuration.
//!
//! Every pipeline knob lives here with its default; a config file sets any
//! subset and unknown keys are rejected. `#` starts a comment.

use crate::anomaly::{InferenceConfig, PostprocessConfig};
use crate::codec::{BinarizeMode, BitplaneCodec, Codec, LearnedArch};
use crate::datagen::PhantomSpec;
use crate::denoiser::DenoiserArch;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::training::{OptimizerKind, TrainConfig};
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Bitplane,
    Learned,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecKind::Bitplane => write!(f, "bitplane"),
            CodecKind::Learned => write!(f, "learned"),
        }
    }
}

impl std::str::FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitplane" => Ok(CodecKind::Bitplane),
            "learned" => Ok(CodecKind::Learned),
            other => Err(Error::Config(format!("unknown codec kind '{other}'"))),
        }
    }
}

/// The full run configuration; paper-default values where the source
/// material pins them (T = 1000, lr 1e-4, batch 32, L = 200, P = 0.5).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub schedule_kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub codec_kind: CodecKind,
    pub latent_channels: usize,
    pub downsample: usize,
    pub bits_per_pixel: usize,
    pub codec_hidden: usize,
    pub codec_kernel: usize,

    pub denoiser_hidden: usize,
    pub denoiser_blocks: usize,
    pub denoiser_kernel: usize,
    pub denoiser_time_dim: usize,
    pub denoiser_recenter: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: usize,

    pub noise_level: usize,
    pub mask_threshold: f64,
    pub binarize_mode: BinarizeMode,
    pub record_trace: bool,

    pub median_kernel: usize,
    pub seg_threshold: f64,
    pub min_component: usize,
    pub normalize_map: bool,

    pub image_size: usize,
    pub image_channels: usize,
    pub ellipse_min: f64,
    pub ellipse_max: f64,
    pub band_jitter: f64,
    pub gradient_amplitude: f64,
    pub detail_count_min: usize,
    pub detail_count_max: usize,
    pub detail_radius_min: f64,
    pub detail_radius_max: f64,
    pub detail_amplitude_min: f64,
    pub detail_amplitude_max: f64,
    pub blob_radius_min: usize,
    pub blob_radius_max: usize,
    pub blob_delta_min: f64,
    pub blob_delta_max: f64,
    pub blob_count_min: usize,
    pub blob_count_max: usize,

    pub data_dir: String,
    pub out_dir: String,
    pub model_path: String,
    pub codec_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule_kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            codec_kind: CodecKind::Bitplane,
            latent_channels: 4,
            downsample: 4,
            bits_per_pixel: 4,
            codec_hidden: 12,
            codec_kernel: 3,
            denoiser_hidden: 16,
            denoiser_blocks: 2,
            denoiser_kernel: 3,
            denoiser_time_dim: 16,
            denoiser_recenter: true,
            learning_rate: 1e-4,
            batch_size: 32,
            iterations: 1000,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 0,
            noise_level: 200,
            mask_threshold: 0.5,
            binarize_mode: BinarizeMode::Sample,
            record_trace: false,
            median_kernel: 5,
            seg_threshold: 0.5,
            min_component: 10,
            normalize_map: false,
            image_size: 64,
            image_channels: 1,
            ellipse_min: 0.55,
            ellipse_max: 0.85,
            band_jitter: 0.05,
            gradient_amplitude: 0.04,
            detail_count_min: 0,
            detail_count_max: 0,
            detail_radius_min: 2.0,
            detail_radius_max: 4.0,
            detail_amplitude_min: 0.3,
            detail_amplitude_max: 0.4,
            blob_radius_min: 3,
            blob_radius_max: 6,
            blob_delta_min: 0.5,
            blob_delta_max: 0.8,
            blob_count_min: 1,
            blob_count_max: 3,
            data_dir: String::new(),
            out_dir: String::new(),
            model_path: String::new(),
            codec_path: String::new(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl RunConfig {
            /// Apply one key=value assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = config_keys!(@parse $kind, key, value)?;
                        Ok(())
                    })+
                    other => Err(Error::Config(format!("unknown config key '{other}'"))),
                }
            }

            /// Serialize every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, self.$field));)+
                out
            }
        }
    };
    (@parse parse, $key:expr, $value:expr) => {
        $value.parse().map_err(|_| {
            Error::Config(format!("cannot parse value '{}' for key '{}'", $value, $key))
        })
    };
    (@parse from_str, $key:expr, $value:expr) => {
        $value.parse::<_>()
    };
    (@parse string, $key:expr, $value:expr) => {
        Ok::<_, Error>($value.to_string())
    };
}

config_keys! {
    "seed" => seed: parse,
    "schedule.kind" => schedule_kind: from_str,
    "schedule.timesteps" => timesteps: parse,
    "schedule.beta_start" => beta_start: parse,
    "schedule.beta_end" => beta_end: parse,
    "codec.kind" => codec_kind: from_str,
    "codec.latent_channels" => latent_channels: parse,
    "codec.downsample" => downsample: parse,
    "codec.bits_per_pixel" => bits_per_pixel: parse,
    "codec.hidden" => codec_hidden: parse,
    "codec.kernel" => codec_kernel: parse,
    "denoiser.hidden" => denoiser_hidden: parse,
    "denoiser.blocks" => denoiser_blocks: parse,
    "denoiser.kernel" => denoiser_kernel: parse,
    "denoiser.time_dim" => denoiser_time_dim: parse,
    "denoiser.recenter" => denoiser_recenter: parse,
    "train.learning_rate" => learning_rate: parse,
    "train.batch_size" => batch_size: parse,
    "train.iterations" => iterations: parse,
    "train.optimizer" => optimizer: from_str,
    "train.checkpoint_every" => checkpoint_every: parse,
    "infer.noise_level" => noise_level: parse,
    "infer.threshold" => mask_threshold: parse,
    "infer.binarize_mode" => binarize_mode: from_str,
    "infer.record_trace" => record_trace: parse,
    "post.median_kernel" => median_kernel: parse,
    "post.threshold" => seg_threshold: parse,
    "post.min_component" => min_component: parse,
    "post.normalize" => normalize_map: parse,
    "datagen.size" => image_size: parse,
    "datagen.channels" => image_channels: parse,
    "datagen.ellipse_min" => ellipse_min: parse,
    "datagen.ellipse_max" => ellipse_max: parse,
    "datagen.band_jitter" => band_jitter: parse,
    "datagen.gradient_amplitude" => gradient_amplitude: parse,
    "datagen.detail_count_min" => detail_count_min: parse,
    "datagen.detail_count_max" => detail_count_max: parse,
    "datagen.detail_radius_min" => detail_radius_min: parse,
    "datagen.detail_radius_max" => detail_radius_max: parse,
    "datagen.detail_amplitude_min" => detail_amplitude_min: parse,
    "datagen.detail_amplitude_max" => detail_amplitude_max: parse,
    "datagen.blob_radius_min" => blob_radius_min: parse,
    "datagen.blob_radius_max" => blob_radius_max: parse,
    "datagen.blob_delta_min" => blob_delta_min: parse,
    "datagen.blob_delta_max" => blob_delta_max: parse,
    "datagen.blob_count_min" => blob_count_min: parse,
    "datagen.blob_count_max" => blob_count_max: parse,
    "paths.data" => data_dir: string,
    "paths.out" => out_dir: string,
    "paths.model" => model_path: string,
    "paths.codec" => codec_path: string,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply assignments from config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_kind, self.timesteps, self.beta_start, self.beta_end)
    }

    /// The config-described codec; a learned codec needs a checkpoint, so
    /// only the bitplane kind can be built from the config alone.
    pub fn build_bitplane_codec(&self) -> Result<Codec> {
        Ok(Codec::Bitplane(BitplaneCodec::new(self.bits_per_pixel, self.downsample)?))
    }

    pub fn denoiser_arch(&self, latent_channels: usize) -> DenoiserArch {
        DenoiserArch {
            in_channels: latent_channels,
            hidden: self.denoiser_hidden,
            blocks: self.denoiser_blocks,
            kernel: self.denoiser_kernel,
            time_dim: self.denoiser_time_dim,
            recenter: self.denoiser_recenter,
        }
    }

    pub fn learned_arch(&self) -> LearnedArch {
        LearnedArch {
            image_channels: self.image_channels,
            latent_channels: self.latent_channels,
            downsample: self.downsample,
            hidden: self.codec_hidden,
            kernel: self.codec_kernel,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            optimizer: self.optimizer,
            seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn inference_config(&self, seed: u64) -> InferenceConfig {
        InferenceConfig {
            noise_level: self.noise_level,
            threshold: self.mask_threshold,
            binarize_mode: self.binarize_mode,
            seed,
            record_trace: self.record_trace,
            postprocess: PostprocessConfig {
                median_kernel: self.median_kernel,
                threshold: self.seg_threshold,
                min_component: self.min_component,
                normalize: self.normalize_map,
            },
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.image_size,
            channels: self.image_channels,
            ellipse_axes: (self.ellipse_min, self.ellipse_max),
            band_jitter: self.band_jitter,
            gradient_amplitude: self.gradient_amplitude,
            detail_count: (self.detail_count_min, self.detail_count_max),
            detail_radius: (self.detail_radius_min, self.detail_radius_max),
            detail_amplitude: (self.detail_amplitude_min, self.detail_amplitude_max),
            blob_radius: (self.blob_radius_min, self.blob_radius_max),
            blob_delta: (self.blob_delta_min, self.blob_delta_max),
            blob_count: (self.blob_count_min, self.blob_count_max),
            seed: self.seed,
            ..PhantomSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("schedule.kind", "cosine").unwrap();
        cfg.set("infer.noise_level", "300").unwrap();
        cfg.set("train.optimizer", "sgd").unwrap();
        cfg.set("paths.data", "some/dir").unwrap();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(parsed.noise_level, 300);
        assert_eq!(parsed.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("no.such.key = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("schedule.timesteps = banana").is_err());
        assert!(RunConfig::parse("schedule.kind = triangular").is_err());
        assert!(RunConfig::parse("just a line").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn paper_defaults_present() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.timesteps, 1000);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.noise_level, 200);
        assert_eq!(cfg.mask_threshold, 0.5);
        assert_eq!(cfg.median_kernel, 5);
        assert_eq!(cfg.seg_threshold, 0.5);
        assert_eq!(cfg.min_component, 10);
    }
}
