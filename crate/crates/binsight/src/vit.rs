//! Vision-transformer building blocks: patch embedding, fixed 2-D sinusoidal
//! positional embeddings and a pre-norm encoder stack. The same encoder is
//! shared by masked-autoencoder pretraining and every classification head.

use rand_chacha::ChaCha8Rng;

use crate::byteplot::ByteImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
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
    pub use_class_token: bool,
}

impl ViTConfig {
    /// ViT-Base/16 geometry: 224² input, 16² patches, width 768, 12 blocks,
    /// 12 heads; decoder width 384 with 4 blocks.
    pub fn base() -> ViTConfig {
        ViTConfig {
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
            use_class_token: false,
        }
    }

    /// Desk-scale geometry for training tests: 64² input, 8² patches,
    /// width 64, 4 encoder / 2 decoder blocks, 4 heads.
    pub fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            encoder_dim: 64,
            encoder_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 32,
            decoder_blocks: 2,
            decoder_heads: 4,
            use_class_token: false,
        }
    }

    pub fn with_class_token(mut self) -> ViTConfig {
        self.use_class_token = true;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches per image.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length (`channels * patch_size²`).
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 {
            return err("image_size and patch_size must be >= 1".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.encoder_dim.is_multiple_of(self.heads) {
            return err(format!(
                "encoder_dim {} not divisible by heads {}",
                self.encoder_dim, self.heads
            ));
        }
        if !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return err(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        for (name, dim) in [("encoder_dim", self.encoder_dim), ("decoder_dim", self.decoder_dim)] {
            if dim % 4 != 0 {
                return err(format!("{name} {dim} must be divisible by 4 for 2-D embeddings"));
            }
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 || self.mlp_ratio == 0 {
            return err("block counts and mlp_ratio must be >= 1".into());
        }
        Ok(())
    }
}

pub struct LinearParams {
    /// `[in, out]`; applied as `x @ weight + bias`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub(crate) fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> LinearParams {
        LinearParams {
            weight: Tensor::trunc_normal(&[inputs, outputs], 0.02, rng).requires_grad(),
            bias: Tensor::zeros(&[outputs]).requires_grad(),
        }
    }

    /// Zero weights; used for the last projection of each residual branch so
    /// a freshly initialized stack is the identity map.
    fn init_zero(inputs: usize, outputs: usize) -> LinearParams {
        LinearParams {
            weight: Tensor::zeros(&[inputs, outputs]).requires_grad(),
            bias: Tensor::zeros(&[outputs]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub(crate) fn init(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: Tensor::full(&[dim], 1.0).requires_grad(),
            beta: Tensor::zeros(&[dim]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layernorm(&self.gamma, &self.beta, 1e-6)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            query: LinearParams::init(dim, dim, rng),
            key: LinearParams::init(dim, dim, rng),
            value: LinearParams::init(dim, dim, rng),
            output: LinearParams::init_zero(dim, dim),
            heads,
        }
    }

    /// Multi-head self-attention over `[B, T, D]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = match *x.shape() {
            [b, t, d] => (b, t, d),
            _ => {
                return Err(Error::InvalidShape {
                    op: "attention",
                    shape: x.shape().to_vec(),
                    reason: "expected [batch, tokens, dim]".into(),
                })
            }
        };
        let h = self.heads;
        let hd = d / h;
        let split = |proj: Result<Tensor>| -> Result<Tensor> {
            proj?.reshape(&[b, t, h, hd])?.transpose(1, 2) // [B, H, T, hd]
        };
        let q = split(self.query.forward(x))?;
        let k = split(self.key.forward(x))?;
        let v = split(self.value.forward(x))?;

        let scores = q
            .matmul(&k.transpose(2, 3)?)?
            .scale(1.0 / (hd as f64).sqrt());
        let attn = scores.softmax(3)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape(&[b, t, d])?;
        self.output.forward(&ctx)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.query.collect(&format!("{prefix}.query"), out);
        self.key.collect(&format!("{prefix}.key"), out);
        self.value.collect(&format!("{prefix}.value"), out);
        self.output.collect(&format!("{prefix}.output"), out);
    }
}

pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> MlpParams {
        MlpParams {
            fc1: LinearParams::init(dim, hidden, rng),
            fc2: LinearParams::init_zero(hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}

/// One pre-norm transformer block.
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn init(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> BlockParams {
        BlockParams {
            norm1: LayerNormParams::init(dim),
            attention: AttentionParams::init(dim, heads, rng),
            norm2: LayerNormParams::init(dim),
            mlp: MlpParams::init(dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attention.forward(&self.norm1.forward(x)?)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.attention.collect(&format!("{prefix}.attention"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

/// Learnable state of the encoder. The positional table is fixed (generated
/// from the config, never trained) and therefore not stored here.
pub struct EncoderParams {
    pub patch_embed: LinearParams,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    /// Present on classification models only.
    pub class_token: Option<Tensor>,
}

impl EncoderParams {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> EncoderParams {
        let dim = cfg.encoder_dim;
        EncoderParams {
            patch_embed: LinearParams::init(cfg.patch_dim(), dim, rng),
            blocks: (0..cfg.encoder_blocks)
                .map(|_| BlockParams::init(dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            final_norm: LayerNormParams::init(dim),
            class_token: cfg
                .use_class_token
                .then(|| Tensor::zeros(&[1, dim]).requires_grad()),
        }
    }

    /// Named parameters in a stable order (checkpoint manifest order).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.patch_embed.collect("encoder.patch_embed", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("encoder.blocks.{i}"), &mut out);
        }
        self.final_norm.collect("encoder.final_norm", &mut out);
        if let Some(cls) = &self.class_token {
            out.push(("encoder.class_token".into(), cls.clone()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count computed from the config alone (no allocation).
    pub fn param_count_for(cfg: &ViTConfig) -> usize {
        let d = cfg.encoder_dim;
        let patch = cfg.patch_dim() * d + d;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let mlp = d * (d * cfg.mlp_ratio) + d * cfg.mlp_ratio + (d * cfg.mlp_ratio) * d + d;
        let block = 2 * ln + attn + mlp;
        patch + cfg.encoder_blocks * block + ln + if cfg.use_class_token { d } else { 0 }
    }
}

/// Splits an image into flattened patches: `[N, P]` with `N = grid²` and
/// `P = channels * patch_size²`. Patches are ordered row-major over the patch
/// grid; inside a patch values are channel-major, then row-major.
pub fn patchify(img: &ByteImage, cfg: &ViTConfig) -> Result<Tensor> {
    if img.width != cfg.image_size || img.height != cfg.image_size || img.channels != cfg.in_channels
    {
        return Err(Error::Geometry {
            expected: format!(
                "{}x{}x{} image",
                cfg.image_size, cfg.image_size, cfg.in_channels
            ),
            got: format!("{}x{}x{}", img.width, img.height, img.channels),
        });
    }
    let ps = cfg.patch_size;
    let grid = cfg.grid();
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.in_channels {
                for py in 0..ps {
                    for px in 0..ps {
                        data.push(img.pixel(c, gy * ps + py, gx * ps + px));
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cfg.num_patches(), cfg.patch_dim()], data)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(t: &Tensor, cfg: &ViTConfig) -> Result<ByteImage> {
    if t.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::Geometry {
            expected: format!("[{}, {}] tensor", cfg.num_patches(), cfg.patch_dim()),
            got: format!("{:?}", t.shape()),
        });
    }
    let ps = cfg.patch_size;
    let grid = cfg.grid();
    let side = cfg.image_size;
    let plane = side * side;
    let mut pixels = vec![0.0; cfg.in_channels * plane];
    let data = t.data();
    let mut cursor = 0;
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.in_channels {
                for py in 0..ps {
                    for px in 0..ps {
                        pixels[c * plane + (gy * ps + py) * side + (gx * ps + px)] = data[cursor];
                        cursor += 1;
                    }
                }
            }
        }
    }
    drop(data);
    ByteImage::new(side, side, cfg.in_channels, pixels)
}

/// Fixed 2-D sinusoidal positional table for a `grid_h x grid_w` patch grid.
///
/// The first `dim/2` features encode the row index, the rest the column
/// index, each as interleaved sin/cos pairs at geometrically spaced
/// frequencies (`10000^(-2i/half)`).
pub fn pos_embed_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding dim {dim} must be divisible by 4"
        )));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let omegas: Vec<f64> = (0..pairs)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / pairs as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for coord in [r, c] {
                for w in &omegas {
                    let angle = coord as f64 * w;
                    data.push(angle.sin());
                    data.push(angle.cos());
                }
            }
        }
    }
    Tensor::from_vec(&[grid_h * grid_w, dim], data)
}

/// Runs the pre-norm block stack plus the final layer norm over
/// `[B, T, encoder_dim]` tokens.
pub fn encoder_forward(tokens: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let dim = params.final_norm.gamma.len();
    if tokens.rank() != 3 || tokens.shape()[2] != dim {
        return Err(Error::InvalidShape {
            op: "encoder_forward",
            shape: tokens.shape().to_vec(),
            reason: format!("expected [batch, tokens, {dim}]"),
        });
    }
    let mut x = tokens.clone();
    for block in &params.blocks {
        x = block.forward(&x)?;
    }
    params.final_norm.forward(&x)
}
