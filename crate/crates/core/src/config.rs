//! Model, metric-model and training configuration with the two presets.
//!
//! `desk` is sized for a single CPU core; `paper` carries the published
//! hyper-parameters (64×64 images, MART hidden 192 with 6 heads, 300-d word
//! vectors, 8×8×2048 captioner regions, 120 epochs).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected desk|paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_memory_cells: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub max_seq_len: usize,
}

impl MartConfig {
    pub fn desk(max_seq_len: usize) -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            num_memory_cells: 3,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            max_seq_len,
        }
    }

    pub fn paper(max_seq_len: usize) -> Self {
        Self {
            hidden_size: 192,
            num_layers: 2,
            num_heads: 6,
            num_memory_cells: 3,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.num_memory_cells == 0
            || self.max_seq_len == 0
        {
            return Err(Error::config("MART counts must all be at least 1"));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "MART hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How the context encoder's memory starts each story.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextVariant {
    /// Memory cells are projections of the conditioning vector h0.
    Mart,
    /// Plain recurrent transformer: memory starts at zero, h0 unused there.
    Transformer,
}

/// Generator-side dimensions (θ_G) and discriminator widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub story_len: usize,
    pub max_caption_len: usize,
    pub num_chars: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub sent_dim: usize,
    pub cond_dim: usize,
    pub gru_dim: usize,
    pub gist_proj_dim: usize,
    pub gist_channels: usize,
    pub mart: MartConfig,
    pub context_variant: ContextVariant,
    /// Channel width D_i of generator feature maps.
    pub gen_channels: usize,
    /// Side N_s of the sub-region grid used by the attention modules.
    pub feature_grid: usize,
    pub copy_transform: bool,
    pub disc_channels: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset, vocab_size: usize) -> Self {
        match p {
            Preset::Desk => Self {
                image_size: 32,
                story_len: 5,
                max_caption_len: 24,
                num_chars: 9,
                vocab_size,
                word_dim: 32,
                sent_dim: 128,
                cond_dim: 128,
                gru_dim: 64,
                gist_proj_dim: 32,
                gist_channels: 64,
                mart: MartConfig::desk(24),
                context_variant: ContextVariant::Mart,
                gen_channels: 16,
                feature_grid: 4,
                copy_transform: true,
                disc_channels: 16,
            },
            Preset::Paper => Self {
                image_size: 64,
                story_len: 5,
                max_caption_len: 24,
                num_chars: 9,
                vocab_size,
                word_dim: 300,
                sent_dim: 128,
                cond_dim: 128,
                gru_dim: 128,
                gist_proj_dim: 64,
                gist_channels: 128,
                mart: MartConfig::paper(24),
                context_variant: ContextVariant::Mart,
                gen_channels: 64,
                feature_grid: 8,
                copy_transform: true,
                disc_channels: 64,
            },
        }
    }

    /// Smallest configuration that still exercises every code path; used by
    /// gradient checks and contract tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_size: 16,
            story_len: 3,
            max_caption_len: 6,
            num_chars: 9,
            vocab_size,
            word_dim: 6,
            sent_dim: 8,
            cond_dim: 8,
            gru_dim: 6,
            gist_proj_dim: 4,
            gist_channels: 8,
            mart: MartConfig {
                hidden_size: 8,
                num_layers: 2,
                num_heads: 2,
                num_memory_cells: 3,
                dropout: 0.0,
                layer_norm_eps: 1e-12,
                max_seq_len: 6,
            },
            context_variant: ContextVariant::Mart,
            gen_channels: 4,
            feature_grid: 2,
            copy_transform: true,
            disc_channels: 4,
        }
    }

    pub fn half_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.mart.validate()?;
        if self.story_len == 0 || self.max_caption_len == 0 || self.num_chars == 0 {
            return Err(Error::config(
                "story_len, max_caption_len and num_chars must be >= 1",
            ));
        }
        if self.mart.max_seq_len < self.max_caption_len {
            return Err(Error::config("mart.max_seq_len must cover max_caption_len"));
        }
        let half = self.half_size();
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::config("image_size must be a power of two >= 16"));
        }
        if self.feature_grid == 0 || half % self.feature_grid != 0 || half / self.feature_grid == 0
        {
            return Err(Error::config("feature_grid must divide image_size/2"));
        }
        if self.vocab_size < 5 {
            return Err(Error::config(
                "vocab_size must include the specials and at least one word",
            ));
        }
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("sent_dim", self.sent_dim),
            ("cond_dim", self.cond_dim),
            ("gru_dim", self.gru_dim),
            ("gist_proj_dim", self.gist_proj_dim),
            ("gist_channels", self.gist_channels),
            ("gen_channels", self.gen_channels),
            ("disc_channels", self.disc_channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Fingerprint of every architectural field; stored in checkpoints.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    crate::nn::params::hex(&Sha256::digest(bytes)[..8])
}

/// Alternative dual networks; only the recurrent video captioner is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualVariant {
    MartVideo,
    CnnLstmVideo,
    CnnLstmImage,
    TransformerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerConfig {
    pub variant: DualVariant,
    pub image_size: usize,
    pub story_len: usize,
    pub max_caption_len: usize,
    pub vocab_size: usize,
    /// Region feature width d_f.
    pub region_dim: usize,
    /// Regions per frame are region_grid².
    pub region_grid: usize,
    pub conv_channels: usize,
    pub mart: MartConfig,
}

impl CaptionerConfig {
    pub fn preset(p: Preset, vocab_size: usize) -> Self {
        match p {
            Preset::Desk => Self {
                variant: DualVariant::MartVideo,
                image_size: 32,
                story_len: 5,
                max_caption_len: 24,
                vocab_size,
                region_dim: 128,
                region_grid: 4,
                conv_channels: 16,
                mart: MartConfig::desk(16 + 24),
            },
            Preset::Paper => Self {
                variant: DualVariant::MartVideo,
                image_size: 64,
                story_len: 5,
                max_caption_len: 24,
                vocab_size,
                region_dim: 2048,
                region_grid: 8,
                conv_channels: 64,
                mart: MartConfig::paper(64 + 24),
            },
        }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            variant: DualVariant::MartVideo,
            image_size: 16,
            story_len: 3,
            max_caption_len: 6,
            vocab_size,
            region_dim: 8,
            region_grid: 2,
            conv_channels: 4,
            mart: MartConfig {
                max_seq_len: 4 + 6,
                ..ModelConfig::tiny(vocab_size).mart
            },
        }
    }

    pub fn num_regions(&self) -> usize {
        self.region_grid * self.region_grid
    }

    pub fn validate(&self) -> Result<()> {
        self.mart.validate()?;
        if self.variant != DualVariant::MartVideo {
            return Err(Error::config(format!(
                "dual variant {:?} is not built; only mart_video is available",
                self.variant
            )));
        }
        if self.image_size % self.region_grid != 0
            || !(self.image_size / self.region_grid).is_power_of_two()
        {
            return Err(Error::config(
                "region_grid must divide image_size by a power of two",
            ));
        }
        if self.mart.max_seq_len < self.num_regions() + self.max_caption_len {
            return Err(Error::config(
                "captioner mart.max_seq_len must cover regions + caption",
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub num_chars: usize,
    pub conv_channels: usize,
    pub feature_dim: usize,
}

impl ClassifierConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                image_size: 32,
                num_chars: 9,
                conv_channels: 16,
                feature_dim: 64,
            },
            Preset::Paper => Self {
                image_size: 64,
                num_chars: 9,
                conv_channels: 64,
                feature_dim: 2048,
            },
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamsmConfig {
    pub image_size: usize,
    pub story_len: usize,
    pub max_caption_len: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    /// Joint embedding width (BiLSTM output and projected image features).
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub region_grid: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Smoothing coefficient of the two story-level losses.
    pub story_gamma: f64,
}

impl DamsmConfig {
    pub fn preset(p: Preset, vocab_size: usize) -> Self {
        let base = Self {
            image_size: 32,
            story_len: 5,
            max_caption_len: 24,
            vocab_size,
            word_dim: 32,
            embed_dim: 64,
            conv_channels: 16,
            region_grid: 4,
            gamma1: 4.0,
            gamma2: 5.0,
            gamma3: 10.0,
            story_gamma: 15.0,
        };
        match p {
            Preset::Desk => base,
            Preset::Paper => Self {
                image_size: 64,
                word_dim: 300,
                embed_dim: 256,
                conv_channels: 64,
                region_grid: 8,
                ..base
            },
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub checkpoint_every: usize,
    pub image_batch: usize,
    pub story_batch: usize,
    pub g_updates_per_d: usize,
    pub lambda_dual: f64,
    pub lambda_char: f64,
    pub seed: u64,
    /// Stop after this many steps regardless of epochs.
    pub max_steps: Option<u64>,
    /// Override the data-derived number of steps per epoch.
    pub steps_per_epoch: Option<u64>,
    /// Validation stories used for the per-epoch character F1 (0 disables).
    pub val_stories: usize,
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let paper = Self {
            lr_g: 2e-4,
            lr_d: 1e-4,
            betas: (0.5, 0.999),
            epochs: 120,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            checkpoint_every: 10,
            image_batch: 20,
            story_batch: 4,
            g_updates_per_d: 2,
            lambda_dual: 1.0,
            lambda_char: 1.0,
            seed: 0,
            max_steps: None,
            steps_per_epoch: None,
            val_stories: 200,
        };
        match p {
            Preset::Paper => paper,
            // Half-size batches keep a 2000-step desk run inside an hour on
            // one CPU core.
            Preset::Desk => Self {
                epochs: 3,
                checkpoint_every: 1,
                image_batch: 10,
                story_batch: 2,
                val_stories: 100,
                ..paper
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.image_batch == 0 || self.story_batch == 0 || self.g_updates_per_d == 0 {
            return Err(Error::config("batch sizes and update counts must be >= 1"));
        }
        if self.lr_decay_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("decay and checkpoint intervals must be >= 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Learning-rate multiplier for a zero-based epoch index.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        self.lr_decay_factor
            .powi((epoch / self.lr_decay_every) as i32)
    }

    /// Whether a checkpoint is written after finishing `epoch` (one-based).
    pub fn is_checkpoint_epoch(&self, completed_epochs: usize) -> bool {
        completed_epochs > 0 && completed_epochs % self.checkpoint_every == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Paper] {
            ModelConfig::preset(p, 40).validate().unwrap();
            CaptionerConfig::preset(p, 40).validate().unwrap();
            TrainConfig::preset(p).validate().unwrap();
        }
        ModelConfig::tiny(20).validate().unwrap();
        CaptionerConfig::tiny(20).validate().unwrap();
    }

    #[test]
    fn paper_schedule_values() {
        let t = TrainConfig::preset(Preset::Paper);
        assert_eq!((t.lr_g, t.lr_d), (2e-4, 1e-4));
        assert_eq!(t.betas, (0.5, 0.999));
        assert_eq!(
            (t.image_batch, t.story_batch, t.g_updates_per_d),
            (20, 4, 2)
        );
        assert_eq!(t.lr_scale(19), 1.0);
        assert_eq!(t.lr_scale(20), 0.5);
        assert_eq!(t.lr_scale(40), 0.25);
        assert!(t.is_checkpoint_epoch(10) && !t.is_checkpoint_epoch(15));
        let m = ModelConfig::preset(Preset::Paper, 10);
        assert_eq!(
            (
                m.mart.hidden_size,
                m.mart.num_heads,
                m.mart.num_memory_cells
            ),
            (192, 6, 3)
        );
        assert_eq!(m.word_dim, 300);
        let c = CaptionerConfig::preset(Preset::Paper, 10);
        assert_eq!((c.num_regions(), c.region_dim), (64, 2048));
    }

    #[test]
    fn mart_rejects_indivisible_heads() {
        let mut m = MartConfig::desk(24);
        m.num_heads = 5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn presets_hash_differently() {
        assert_ne!(
            ModelConfig::preset(Preset::Desk, 40).hash(),
            ModelConfig::preset(Preset::Paper, 40).hash()
        );
    }
}
