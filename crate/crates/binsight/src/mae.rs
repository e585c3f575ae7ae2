//! Masked-autoencoder pretraining.
//!
//! 75% of the patches are hidden by default; only the visible quarter passes
//! through the encoder. The decoder sees the projected visible tokens plus a
//! shared learnable mask token at every hidden position (all with positional
//! embeddings), and regresses the pixels of each patch. The loss is mean
//! squared error over masked-patch pixels against per-patch normalized
//! targets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::byteplot::ByteImage;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::seed::{mix_str, mix_u64, rng_from};
use crate::tensor::optim::AdamW;
use crate::tensor::Tensor;
use crate::vit::{
    encoder_forward, patchify, pos_embed_2d, unpatchify, BlockParams, EncoderParams,
    LayerNormParams, LinearParams, ViTConfig,
};

pub const DEFAULT_KEEP_RATIO: f64 = 0.25;
pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Partition of patch indices into visible and masked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_patches: usize,
    /// Sorted indices fed to the encoder.
    pub visible: Vec<usize>,
    /// Sorted indices replaced by the mask token.
    pub masked: Vec<usize>,
    pub seed: u64,
}

/// Uniform sample (without replacement) of `round(keep_ratio * n_patches)`
/// visible patches from a ChaCha8 generator seeded with `seed`.
pub fn sample_mask(n_patches: usize, keep_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0 < keep_ratio && keep_ratio < 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio must lie strictly between 0 and 1, got {keep_ratio}"
        )));
    }
    let n_visible = (keep_ratio * n_patches as f64).round() as usize;
    if n_visible == 0 || n_visible >= n_patches {
        return Err(Error::DegenerateMask {
            visible: n_visible,
            total: n_patches,
        });
    }
    let mut rng = rng_from(seed);
    let mut visible = rand::seq::index::sample(&mut rng, n_patches, n_visible).into_vec();
    visible.sort_unstable();
    let mut is_visible = vec![false; n_patches];
    for &v in &visible {
        is_visible[v] = true;
    }
    let masked = (0..n_patches).filter(|&i| !is_visible[i]).collect();
    Ok(MaskPlan {
        n_patches,
        visible,
        masked,
        seed,
    })
}

/// Per-patch target normalization: `(x - mean) / (std + eps)` with the
/// population standard deviation.
pub fn patch_normalize(values: &[f64], eps: f64) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// Tensor wrapper over [`patch_normalize`] (targets carry no gradient).
pub fn patch_normalize_tensor(target: &Tensor, eps: f64) -> Result<Tensor> {
    if target.rank() != 1 || target.len() < 2 {
        return Err(Error::InvalidShape {
            op: "patch_normalize",
            shape: target.shape().to_vec(),
            reason: "expected a flat patch of at least 2 pixels".into(),
        });
    }
    Tensor::from_vec(target.shape(), patch_normalize(&target.to_vec(), eps))
}

/// Learnable state of the masked autoencoder.
pub struct MaeParams {
    pub encoder: EncoderParams,
    /// Projection from encoder width to decoder width.
    pub enc_to_dec: LinearParams,
    /// Shared `[1, decoder_dim]` token standing in for every masked patch.
    pub mask_token: Tensor,
    pub decoder_blocks: Vec<BlockParams>,
    pub decoder_norm: LayerNormParams,
    /// Projection from decoder width to pixels per patch.
    pub output_proj: LinearParams,
}

pub struct Mae {
    pub cfg: ViTConfig,
    pub params: MaeParams,
}

pub struct MaeForward {
    /// Predicted (normalized-space) pixels for every patch, `[N, P]`.
    pub reconstruction: Tensor,
    /// Scalar training loss, connected to the graph.
    pub loss: Tensor,
    /// Sequence length seen by the encoder (structurally `|visible|`).
    pub encoder_input_len: usize,
}

impl Mae {
    /// Fresh model; pretraining never uses a class token.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Mae> {
        let mut cfg = *cfg;
        cfg.use_class_token = false;
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let dd = cfg.decoder_dim;
        let params = MaeParams {
            encoder: EncoderParams::init(&cfg, &mut rng),
            enc_to_dec: LinearParams {
                weight: Tensor::trunc_normal(&[cfg.encoder_dim, dd], 0.02, &mut rng)
                    .requires_grad(),
                bias: Tensor::zeros(&[dd]).requires_grad(),
            },
            mask_token: Tensor::trunc_normal(&[1, dd], 0.02, &mut rng).requires_grad(),
            decoder_blocks: (0..cfg.decoder_blocks)
                .map(|_| BlockParams::init(dd, cfg.decoder_heads, cfg.mlp_ratio, &mut rng))
                .collect(),
            decoder_norm: LayerNormParams::init(dd),
            output_proj: LinearParams {
                weight: Tensor::trunc_normal(&[dd, cfg.patch_dim()], 0.02, &mut rng)
                    .requires_grad(),
                bias: Tensor::zeros(&[cfg.patch_dim()]).requires_grad(),
            },
        };
        Ok(Mae { cfg, params })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.encoder.named_params();
        out.push((
            "mae.enc_to_dec.weight".into(),
            self.params.enc_to_dec.weight.clone(),
        ));
        out.push((
            "mae.enc_to_dec.bias".into(),
            self.params.enc_to_dec.bias.clone(),
        ));
        out.push(("mae.mask_token".into(), self.params.mask_token.clone()));
        for (i, b) in self.params.decoder_blocks.iter().enumerate() {
            b.collect(&format!("mae.decoder_blocks.{i}"), &mut out);
        }
        out.push((
            "mae.decoder_norm.gamma".into(),
            self.params.decoder_norm.gamma.clone(),
        ));
        out.push((
            "mae.decoder_norm.beta".into(),
            self.params.decoder_norm.beta.clone(),
        ));
        out.push((
            "mae.output_proj.weight".into(),
            self.params.output_proj.weight.clone(),
        ));
        out.push((
            "mae.output_proj.bias".into(),
            self.params.output_proj.bias.clone(),
        ));
        out
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<()> {
        if plan.n_patches != self.cfg.num_patches()
            || plan.visible.len() + plan.masked.len() != plan.n_patches
        {
            return Err(Error::Geometry {
                expected: format!("mask plan over {} patches", self.cfg.num_patches()),
                got: format!(
                    "{} patches ({} visible, {} masked)",
                    plan.n_patches,
                    plan.visible.len(),
                    plan.masked.len()
                ),
            });
        }
        Ok(())
    }

    /// Embedded visible tokens as handed to the encoder: `[1, |visible|, D]`.
    pub fn embed_visible(&self, img: &ByteImage, plan: &MaskPlan) -> Result<Tensor> {
        self.check_plan(plan)?;
        let patches = patchify(img, &self.cfg)?;
        let visible = patches.index_select(0, &plan.visible)?;
        let embedded = self.params.encoder.patch_embed.forward(&visible)?;
        let grid = self.cfg.grid();
        let pos = pos_embed_2d(grid, grid, self.cfg.encoder_dim)?;
        let pos_visible = pos.index_select(0, &plan.visible)?;
        embedded
            .add(&pos_visible)?
            .reshape(&[1, plan.visible.len(), self.cfg.encoder_dim])
    }

    /// Full pipeline: encode visible patches, decode the assembled sequence,
    /// and score masked-pixel reconstruction.
    pub fn forward(&self, img: &ByteImage, plan: &MaskPlan) -> Result<MaeForward> {
        let cfg = &self.cfg;
        let n = cfg.num_patches();
        let p = cfg.patch_dim();
        let n_masked = plan.masked.len();

        let tokens = self.embed_visible(img, plan)?;
        let encoder_input_len = tokens.shape()[1];
        let encoded = encoder_forward(&tokens, &self.params.encoder)?;
        let projected = self
            .params
            .enc_to_dec
            .forward(&encoded)?
            .reshape(&[plan.visible.len(), cfg.decoder_dim])?;

        // Rows: visible tokens first, then mask tokens; reorder into patch
        // position order via a gathering permutation.
        let mask_rows = self.params.mask_token.index_select(0, &vec![0; n_masked])?;
        let stacked = Tensor::concat(&[&projected, &mask_rows], 0)?;
        let mut row_of_position = vec![0usize; n];
        for (rank, &pos) in plan.visible.iter().enumerate() {
            row_of_position[pos] = rank;
        }
        for (rank, &pos) in plan.masked.iter().enumerate() {
            row_of_position[pos] = plan.visible.len() + rank;
        }
        let sequence = stacked.index_select(0, &row_of_position)?;

        let grid = cfg.grid();
        let dec_pos = pos_embed_2d(grid, grid, cfg.decoder_dim)?;
        let mut x = sequence.add(&dec_pos)?.reshape(&[1, n, cfg.decoder_dim])?;
        for block in &self.params.decoder_blocks {
            x = block.forward(&x)?;
        }
        let x = self.params.decoder_norm.forward(&x)?;
        let reconstruction = self.params.output_proj.forward(&x)?.reshape(&[n, p])?;

        // Targets: patch-normalized original pixels; constants w.r.t. the graph.
        let patches = patchify(img, cfg)?;
        let patch_data = patches.to_vec();
        let mut target = vec![0.0; n * p];
        let mut mask_weight = vec![0.0; n * p];
        for &m in &plan.masked {
            let norm = patch_normalize(&patch_data[m * p..(m + 1) * p], PATCH_NORM_EPS);
            target[m * p..(m + 1) * p].copy_from_slice(&norm);
            mask_weight[m * p..(m + 1) * p].fill(1.0);
        }
        let target = Tensor::from_vec(&[n, p], target)?;
        let mask_weight = Tensor::from_vec(&[n, p], mask_weight)?;

        let diff = reconstruction.sub(&target)?;
        let loss = diff
            .mul(&diff)?
            .mul(&mask_weight)?
            .sum()
            .scale(1.0 / (n_masked * p) as f64);

        Ok(MaeForward {
            reconstruction,
            loss,
            encoder_input_len,
        })
    }

    /// Composite visualization: visible patches copied from the original,
    /// masked patches filled with de-normalized predictions (using the
    /// original patch statistics), clipped to `[0, 1]`.
    pub fn synthesize(&self, img: &ByteImage, plan: &MaskPlan) -> Result<ByteImage> {
        let pred = self.forward(img, plan)?.reconstruction;
        synthesize_from_prediction(&pred.to_vec(), img, plan, &self.cfg)
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set("kind", "mae");
        ckpt.set("epoch", epoch);
        write_vit_config(&mut ckpt, &self.cfg);
        for (name, t) in self.named_params() {
            ckpt.push_tensor(&name, &t);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Mae> {
        if ckpt.get("kind") != Some("mae") {
            return Err(Error::Checkpoint(format!(
                "expected a mae checkpoint, found kind `{}`",
                ckpt.get("kind").unwrap_or("<none>")
            )));
        }
        let cfg = read_vit_config(ckpt)?;
        let model = Mae::init(&cfg, 0)?;
        for (name, t) in model.named_params() {
            ckpt.load_into(&name, &t)?;
        }
        Ok(model)
    }
}

/// Builds the Fig-4-style composite from raw predicted pixels.
pub fn synthesize_from_prediction(
    pred: &[f64],
    img: &ByteImage,
    plan: &MaskPlan,
    cfg: &ViTConfig,
) -> Result<ByteImage> {
    let n = cfg.num_patches();
    let p = cfg.patch_dim();
    if pred.len() != n * p {
        return Err(Error::Geometry {
            expected: format!("{} predicted values", n * p),
            got: format!("{}", pred.len()),
        });
    }
    let patches = patchify(img, cfg)?;
    let mut composite = patches.to_vec();
    for &m in &plan.masked {
        let original = &patches.to_vec()[m * p..(m + 1) * p];
        let mean = original.iter().sum::<f64>() / p as f64;
        let var = original.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        let denom = var.sqrt() + PATCH_NORM_EPS;
        for j in 0..p {
            composite[m * p + j] = (pred[m * p + j] * denom + mean).clamp(0.0, 1.0);
        }
    }
    let out = unpatchify(&Tensor::from_vec(&[n, p], composite)?, cfg)?;
    Ok(out.with_source_id(img.source_id.clone()))
}

/// Mean squared error over masked-patch pixels against patch-normalized
/// targets; visible patches contribute nothing.
pub fn recon_loss(pred: &Tensor, target_img: &ByteImage, plan: &MaskPlan, cfg: &ViTConfig) -> Result<f64> {
    let n = cfg.num_patches();
    let p = cfg.patch_dim();
    if pred.shape() != [n, p] {
        return Err(Error::Geometry {
            expected: format!("[{n}, {p}] prediction"),
            got: format!("{:?}", pred.shape()),
        });
    }
    let patches = patchify(target_img, cfg)?;
    let patch_data = patches.to_vec();
    let pred_data = pred.to_vec();
    let mut total = 0.0;
    for &m in &plan.masked {
        let norm = patch_normalize(&patch_data[m * p..(m + 1) * p], PATCH_NORM_EPS);
        for j in 0..p {
            let d = pred_data[m * p + j] - norm[j];
            total += d * d;
        }
    }
    Ok(total / (plan.masked.len() * p) as f64)
}

pub(crate) fn write_vit_config(ckpt: &mut Checkpoint, cfg: &ViTConfig) {
    ckpt.set("image_size", cfg.image_size);
    ckpt.set("patch_size", cfg.patch_size);
    ckpt.set("in_channels", cfg.in_channels);
    ckpt.set("encoder_dim", cfg.encoder_dim);
    ckpt.set("encoder_blocks", cfg.encoder_blocks);
    ckpt.set("heads", cfg.heads);
    ckpt.set("mlp_ratio", cfg.mlp_ratio);
    ckpt.set("decoder_dim", cfg.decoder_dim);
    ckpt.set("decoder_blocks", cfg.decoder_blocks);
    ckpt.set("decoder_heads", cfg.decoder_heads);
    ckpt.set("use_class_token", cfg.use_class_token);
}

pub(crate) fn read_vit_config(ckpt: &Checkpoint) -> Result<ViTConfig> {
    Ok(ViTConfig {
        image_size: ckpt.get_parsed("image_size")?,
        patch_size: ckpt.get_parsed("patch_size")?,
        in_channels: ckpt.get_parsed("in_channels")?,
        encoder_dim: ckpt.get_parsed("encoder_dim")?,
        encoder_blocks: ckpt.get_parsed("encoder_blocks")?,
        heads: ckpt.get_parsed("heads")?,
        mlp_ratio: ckpt.get_parsed("mlp_ratio")?,
        decoder_dim: ckpt.get_parsed("decoder_dim")?,
        decoder_blocks: ckpt.get_parsed("decoder_blocks")?,
        decoder_heads: ckpt.get_parsed("decoder_heads")?,
        use_class_token: ckpt.get_parsed("use_class_token")?,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainHyper {
    /// Number of epochs to run in this call.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub keep_ratio: f64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            epochs: 10,
            batch_size: 8,
            lr: 1.5e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            keep_ratio: DEFAULT_KEEP_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTraceEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

fn mask_seed(seed: u64, epoch: usize, image_index: usize) -> u64 {
    mix_u64(mix_u64(mix_str(seed, "mask"), epoch as u64), image_index as u64)
}

/// Self-supervised pretraining from scratch. Checkpoints (when a directory is
/// given) are written as `mae_epoch<N>.ckpt` after every epoch.
pub fn pretrain(
    dataset: &[ByteImage],
    cfg: &ViTConfig,
    hyper: &PretrainHyper,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(Mae, Vec<LossTraceEntry>)> {
    let model = Mae::init(cfg, mix_str(seed, "mae-init"))?;
    pretrain_loop(model, dataset, hyper, seed, 1, checkpoint_dir)
}

/// Training loop shared by fresh runs and checkpoint resumes. Epochs are
/// numbered from `first_epoch`; the per-image mask stream depends only on
/// `(seed, epoch, image index)`, so a resumed run draws the same masks an
/// uninterrupted one would. Optimizer moments start fresh on resume.
pub fn pretrain_loop(
    model: Mae,
    dataset: &[ByteImage],
    hyper: &PretrainHyper,
    seed: u64,
    first_epoch: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<(Mae, Vec<LossTraceEntry>)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("pretraining needs at least one image".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n_patches = model.cfg.num_patches();
    let params = model.trainable();
    let mut opt = AdamW::new(hyper.lr, hyper.betas, hyper.weight_decay);
    let mut trace = Vec::new();
    let mut step = (first_epoch - 1) * dataset.len().div_ceil(hyper.batch_size);

    for epoch in first_epoch..first_epoch + hyper.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(mix_u64(mix_str(seed, "shuffle"), epoch as u64)));

        for batch in order.chunks(hyper.batch_size) {
            let mut batch_loss: Option<Tensor> = None;
            for &image_index in batch {
                let plan = sample_mask(
                    n_patches,
                    hyper.keep_ratio,
                    mask_seed(seed, epoch, image_index),
                )?;
                let fwd = model.forward(&dataset[image_index], &plan)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&fwd.loss)?,
                    None => fwd.loss,
                });
            }
            let loss = batch_loss
                .expect("chunks are non-empty")
                .scale(1.0 / batch.len() as f64);
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Eval(format!(
                    "non-finite loss {loss_value} at epoch {epoch} step {step}"
                )));
            }
            loss.backward()?;
            opt.step(&params);
            opt.zero_grad(&params);
            step += 1;
            trace.push(LossTraceEntry {
                epoch,
                step,
                loss: loss_value,
            });
        }

        if let Some(dir) = checkpoint_dir {
            let path: PathBuf = dir.join(format!("mae_epoch{epoch}.ckpt"));
            model.to_checkpoint(epoch).save(&path)?;
        }
    }
    Ok((model, trace))
}

/// Writes a loss trace as `epoch,step,loss` CSV (with header).
pub fn write_loss_csv(trace: &[LossTraceEntry], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,step,loss\n");
    for e in trace {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.step, e.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
