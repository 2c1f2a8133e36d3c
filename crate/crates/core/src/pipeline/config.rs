use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::LengthPredictorConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::melstack::MelStackConfig;
use crate::pddpm::{DiffusionSchedule, WaveNetConfig};
use crate::score::{phonemes, NoteType, SPECTRAL_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Sizes that train on one CPU core.
    Desk,
    /// Full-size model: hidden 256, 12-layer denoiser, 80 spectral bins.
    Full,
}

/// Which pitch branches are diffused. Switching one off replaces it with a
/// direct regression head on the pitch condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchVariant {
    pub uv_diffusion: bool,
    pub f0_diffusion: bool,
}

impl Default for PitchVariant {
    fn default() -> Self {
        Self {
            uv_diffusion: true,
            f0_diffusion: true,
        }
    }
}

/// Everything needed to rebuild the network. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub length: LengthPredictorConfig,
    /// Upsampler kernel width in frames.
    pub sigma: f64,
    pub denoiser: WaveNetConfig,
    pub mel: MelStackConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variant: PitchVariant,
    pub sample_final_uv: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (encoder, denoiser, mel) = match preset {
            Preset::Desk => (
                EncoderConfig::desk(),
                WaveNetConfig {
                    layers: 6,
                    kernel: 3,
                    residual_channels: 64,
                    dilation_cycle: 3,
                },
                MelStackConfig {
                    decoder_fft_blocks: 2,
                    postnet: WaveNetConfig {
                        layers: 8,
                        kernel: 3,
                        residual_channels: 64,
                        dilation_cycle: 4,
                    },
                    spectral_dim: SPECTRAL_DIM,
                },
            ),
            Preset::Full => (
                EncoderConfig::full(),
                WaveNetConfig {
                    layers: 12,
                    kernel: 3,
                    residual_channels: 192,
                    dilation_cycle: 4,
                },
                MelStackConfig {
                    decoder_fft_blocks: 4,
                    postnet: WaveNetConfig {
                        layers: 20,
                        kernel: 3,
                        residual_channels: 256,
                        dilation_cycle: 10,
                    },
                    spectral_dim: 80,
                },
            ),
        };
        let length = LengthPredictorConfig::new(encoder.hidden);
        Self {
            encoder,
            length,
            sigma: 10.0,
            denoiser,
            mel,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.06,
            variant: PitchVariant::default(),
            sample_final_uv: false,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.mel.postnet.validate()?;
        if self.encoder.phoneme_vocab < phonemes::vocab_size() {
            return Err(Error::Config(format!(
                "phoneme_vocab {} is smaller than the inventory ({})",
                self.encoder.phoneme_vocab,
                phonemes::vocab_size()
            )));
        }
        if self.encoder.note_type_vocab < NoteType::ALL.len() {
            return Err(Error::Config("note_type_vocab must cover every note type".into()));
        }
        if self.length.hidden != self.encoder.hidden {
            return Err(Error::Config("length predictor width must equal the encoder width".into()));
        }
        if self.mel.decoder_fft_blocks == 0 || self.mel.spectral_dim == 0 {
            return Err(Error::Config("mel decoder sizes must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !self.variant.uv_diffusion && !self.variant.f0_diffusion {
            return Err(Error::Config(
                "uv_diffusion and f0_diffusion cannot both be off: nothing would be diffused".into(),
            ));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub preset: Preset,
    /// Corpus root written by `write_corpus`.
    pub corpus: PathBuf,
    /// Stage-1 checkpoint to start stage 2 from.
    pub init_checkpoint: Option<PathBuf>,
    pub uv_diffusion: bool,
    pub f0_diffusion: bool,
    pub postnet: bool,
    /// Global gradient-norm cap; off when absent.
    pub grad_clip: Option<f64>,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the rate falls linearly towards it.
    pub final_lr_fraction: f64,
    /// Train on random windows of at most this many words (0 = whole songs).
    pub crop_words: usize,
    /// Independent diffusion steps scored per example and step; the
    /// encoder pass is shared between them.
    pub diffusion_draws: usize,
    pub log_every: usize,
    /// Overrides applied to the preset model config, e.g. `{"sigma": 8.0}`.
    pub model: Value,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 6000,
            batch_size: 1,
            learning_rate: 2e-4,
            seed: 0,
            preset: Preset::Desk,
            corpus: PathBuf::from("corpus"),
            init_checkpoint: None,
            uv_diffusion: true,
            f0_diffusion: true,
            postnet: true,
            grad_clip: None,
            final_lr_fraction: 1.0,
            crop_words: 0,
            diffusion_draws: 1,
            log_every: 100,
            model: Value::Object(Default::default()),
        }
    }
}

impl TrainConfig {
    /// Stage-1 settings for the desk preset that fit in an hour on one core:
    /// a higher rate decayed to 5%, whole songs, several diffusion draws.
    pub fn desk_stage1() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            diffusion_draws: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.diffusion_draws == 0 {
            return Err(Error::Config("diffusion_draws must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        if !self.uv_diffusion && !self.f0_diffusion {
            return Err(Error::Config(
                "conflicting toggles: uv_diffusion and f0_diffusion are both off".into(),
            ));
        }
        if self.stage == 2 && !self.postnet {
            return Err(Error::Config("conflicting toggles: stage 2 trains only the post-net, but postnet is off".into()));
        }
        if self.stage == 2 && self.init_checkpoint.is_none() {
            return Err(Error::Config("stage 2 needs init_checkpoint".into()));
        }
        self.model_config()?;
        Ok(())
    }

    /// Preset model config with `model` overrides and the pitch toggles.
    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let frac = (step - 1) as f64 / (self.steps - 1) as f64;
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * frac)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut base = serde_json::to_value(ModelConfig::preset(self.preset))?;
        merge(&mut base, &self.model);
        let mut cfg: ModelConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("model override: {e}")))?;
        cfg.variant = PitchVariant {
            uv_diffusion: self.uv_diffusion,
            f0_diffusion: self.f0_diffusion,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<S: AsRef<str>>(&self, pairs: &[S]) -> Result<Self> {
        apply_overrides(self, pairs)
    }
}

/// Apply `key=value` overrides to any serde config. Keys are dotted paths
/// (`model.sigma`); values parse as JSON and fall back to a plain string.
pub fn apply_overrides<T, S>(cfg: &T, pairs: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut v = serde_json::to_value(cfg)?;
    for pair in pairs {
        let pair = pair.as_ref();
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, key, value)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("object")
            }
            _ => return Err(Error::Config(format!("`{key}` does not name a config field"))),
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}
