//! Run configuration: defaults, flat `key=value` config files, and CLI flag
//! overrides (flags win over the file, the file wins over defaults).

use std::path::Path;

use crate::byteplot::{ColorMode, ConversionConfig};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model geometry
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub encoder_dim: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    // conversion
    pub fixed_width: usize,
    pub canonical_size: usize,
    pub color: ColorMode,
    // training
    pub lr: Option<f64>,
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub keep_ratio: f64,
    // reconstruction evaluation protocol
    pub mask_ratio_eval: f64,
    pub n_masks_eval: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            encoder_dim: 768,
            encoder_blocks: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_dim: 384,
            decoder_blocks: 4,
            decoder_heads: 12,
            fixed_width: 256,
            canonical_size: 256,
            color: ColorMode::DexSections,
            lr: None,
            batch: 16,
            epochs: 5,
            weight_decay: 0.05,
            keep_ratio: 0.25,
            mask_ratio_eval: 0.75,
            n_masks_eval: 10,
            seed: 0,
        }
    }
}

pub const PRETRAIN_DEFAULT_LR: f64 = 1.5e-4;
pub const PRETRAIN_BETAS: (f64, f64) = (0.9, 0.95);
pub const FINETUNE_DEFAULT_LR: f64 = 1e-4;
pub const FINETUNE_BETAS: (f64, f64) = (0.9, 0.999);

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            Error::Config(format!("invalid value `{value}` for config key `{key}`"))
        };
        macro_rules! parse {
            ($field:ident) => {
                self.$field = value.trim().parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "image_size" => parse!(image_size),
            "patch_size" => parse!(patch_size),
            "in_channels" => parse!(in_channels),
            "encoder_dim" => parse!(encoder_dim),
            "encoder_blocks" => parse!(encoder_blocks),
            "heads" => parse!(heads),
            "mlp_ratio" => parse!(mlp_ratio),
            "decoder_dim" => parse!(decoder_dim),
            "decoder_blocks" => parse!(decoder_blocks),
            "decoder_heads" => parse!(decoder_heads),
            "fixed_width" => parse!(fixed_width),
            "canonical_size" => parse!(canonical_size),
            "color" => self.color = parse_color(value)?,
            "lr" => self.lr = Some(value.trim().parse().map_err(|_| bad(key, value))?),
            "batch" => parse!(batch),
            "epochs" => parse!(epochs),
            "weight_decay" => parse!(weight_decay),
            "keep_ratio" => parse!(keep_ratio),
            "mask_ratio_eval" => parse!(mask_ratio_eval),
            "n_masks_eval" => parse!(n_masks_eval),
            "seed" => parse!(seed),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Loads assignments from a flat config file (`#` comments allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            encoder_dim: self.encoder_dim,
            encoder_blocks: self.encoder_blocks,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            decoder_dim: self.decoder_dim,
            decoder_blocks: self.decoder_blocks,
            decoder_heads: self.decoder_heads,
            use_class_token: false,
        }
    }

    pub fn conversion_config(&self) -> ConversionConfig {
        ConversionConfig {
            fixed_width: self.fixed_width,
            canonical_size: self.canonical_size,
            color_mode: self.color,
        }
    }

    /// Full validation; every command runs this before any side effect.
    pub fn validate(&self) -> Result<()> {
        self.vit_config().validate()?;
        self.conversion_config().validate()?;
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lr must be positive, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0 < self.keep_ratio && self.keep_ratio < 1.0) {
            return Err(Error::Config("keep_ratio must lie strictly in (0, 1)".into()));
        }
        if !(0.0 < self.mask_ratio_eval && self.mask_ratio_eval < 1.0) {
            return Err(Error::Config("mask_ratio_eval must lie strictly in (0, 1)".into()));
        }
        if self.n_masks_eval == 0 {
            return Err(Error::Config("n_masks_eval must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn parse_color(value: &str) -> Result<ColorMode> {
    match value.trim().to_ascii_lowercase().as_str() {
        "gray" | "grayscale" => Ok(ColorMode::Grayscale),
        "dex" | "dex-sections" => Ok(ColorMode::DexSections),
        other => Err(Error::Config(format!(
            "color must be `gray` or `dex`, got `{other}`"
        ))),
    }
}
