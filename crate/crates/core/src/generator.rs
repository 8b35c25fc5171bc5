//! Two-stage frame generator with word-to-region attention and the
//! copy-transform from the previous frame's features.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use image::{ImageBuffer, Rgb, RgbImage};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::context_encoder::{ContextEncoder, FrameContext};
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, masked_softmax, randn, to_f64_vec, Builder, Conv2d, Ctx, Linear};
use crate::text_encoder::{ConditioningState, StoryEncoder, TextEncoder};

const SLOPE: f64 = 0.2;

/// (B, D_i, N) sub-region features flattened row-major from an N_s×N_s grid.
#[derive(Clone, Debug)]
pub struct ImageFeatures(pub Tensor);

impl ImageFeatures {
    pub fn zeros(batch: usize, channels: usize, grid: usize, dtype: DType) -> Result<Self> {
        Ok(Self(Tensor::zeros(
            (batch, channels, grid * grid),
            dtype,
            &candle_core::Device::Cpu,
        )?))
    }

    /// Average-pool a (B, C, H, W) map down to `grid`×`grid` regions.
    pub fn pool(map: &Tensor, grid: usize) -> Result<Self> {
        let (b, c, h, _) = map.dims4()?;
        let k = h / grid;
        let pooled = if k == 1 {
            map.clone()
        } else {
            map.avg_pool2d(k)?
        };
        Ok(Self(pooled.reshape((b, c, grid * grid))?))
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedFrame {
    /// (B, 3, H, W) in [-1, 1].
    pub image: Tensor,
    /// (B, 3, H/2, W/2) in [-1, 1].
    pub low_res: Tensor,
    pub stage1_features: ImageFeatures,
    pub stage2_features: ImageFeatures,
    /// (B, N, L) word weights per sub-region in the stage-2 attention.
    pub word_attention: Tensor,
    /// (B, N, L) word weights per previous-frame sub-region.
    pub copy_attention: Tensor,
}

/// Noise for one batch of stories: ε_S for the story encoder and ε_k per frame.
#[derive(Clone, Debug)]
pub struct StoryNoise {
    /// (B, d_h)
    pub story: Tensor,
    /// (B, T, d_s)
    pub frames: Tensor,
}

impl StoryNoise {
    pub fn sample(
        rng: &mut ChaCha8Rng,
        batch: usize,
        cfg: &ModelConfig,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            story: randn(rng, &[batch, cfg.cond_dim], dtype)?,
            frames: randn(rng, &[batch, cfg.story_len, cfg.sent_dim], dtype)?,
        })
    }
}

pub struct StoryOutput {
    pub frames: Vec<GeneratedFrame>,
    pub contexts: Vec<FrameContext>,
    pub cond: ConditioningState,
    /// (B, T, d_s)
    pub sentences: Tensor,
    /// (B, T, 3, H, W)
    pub images: Tensor,
}

/// Word context for each region: β_{ji} = softmax_i(h_jᵀ m'_i) with masked
/// words excluded, c_j = Σ_i β_{ji} m'_i. `words` (B, L, D), `regions`
/// (B, D, N). Returns the context (B, D, N) and β (B, N, L).
pub fn region_word_attention(
    words: &Tensor,
    mask: &Tensor,
    regions: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let logits = regions
        .transpose(1, 2)?
        .contiguous()?
        .matmul(&words.transpose(1, 2)?.contiguous()?)?;
    let mask = mask.to_dtype(words.dtype())?.unsqueeze(1)?;
    let beta = masked_softmax(&logits, &mask)?;
    let ctx = beta.matmul(words)?.transpose(1, 2)?.contiguous()?;
    Ok((ctx, beta))
}

struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        leaky_relu(
            &self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?,
            SLOPE,
        )
    }
}

pub struct Generator {
    cfg: ModelConfig,
    pub text: TextEncoder,
    pub story: StoryEncoder,
    pub context: ContextEncoder,
    seed_fc: Linear,
    stage1_blocks: Vec<UpBlock>,
    stage1_rgb: Conv2d,
    copy_proj: Linear,
    word_proj: Linear,
    fuse: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
    up: UpBlock,
    stage2_rgb: Conv2d,
}

impl Generator {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.gen_channels;
        let h = cfg.mart.hidden_size;
        let half = cfg.half_size();
        let n_up = (half / 4).trailing_zeros() as usize;
        let mut stage1_blocks = Vec::with_capacity(n_up);
        for i in 0..n_up {
            let c_in = if i == 0 { 2 * d } else { d };
            stage1_blocks.push(UpBlock {
                conv: Conv2d::new(&mut b.sub(&format!("stage1_up{i}")), c_in, d, 3, 1, 1)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            text: TextEncoder::new(
                &mut b.sub("text"),
                cfg.vocab_size,
                cfg.word_dim,
                cfg.sent_dim,
            )?,
            story: StoryEncoder::new(
                &mut b.sub("story"),
                cfg.story_len,
                cfg.sent_dim,
                cfg.cond_dim,
            )?,
            context: ContextEncoder::new(&mut b.sub("context"), cfg)?,
            seed_fc: Linear::new(&mut b.sub("seed_fc"), cfg.gist_channels, 2 * d * 16)?,
            stage1_blocks,
            stage1_rgb: Conv2d::new(&mut b.sub("stage1_rgb"), d, 3, 3, 1, 1)?,
            copy_proj: Linear::no_bias(&mut b.sub("copy_proj"), h, d)?,
            word_proj: Linear::no_bias(&mut b.sub("word_proj"), h, d)?,
            fuse: Conv2d::new(&mut b.sub("fuse"), 3 * d, d, 3, 1, 1)?,
            res_a: Conv2d::new(&mut b.sub("res_a"), d, d, 3, 1, 1)?,
            res_b: Conv2d::new(&mut b.sub("res_b"), d, d, 3, 1, 1)?,
            up: UpBlock {
                conv: Conv2d::new(&mut b.sub("stage2_up"), d, d, 3, 1, 1)?,
            },
            stage2_rgb: Conv2d::new(&mut b.sub("stage2_rgb"), d, 3, 3, 1, 1)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `o` (B, C_out) → low-res image (B, 3, H/2, W/2), the H/2 feature map
    /// and its pooled sub-region features.
    pub fn stage1(&self, o: &Tensor) -> Result<(Tensor, Tensor, ImageFeatures)> {
        let bsz = o.dim(0)?;
        let d = self.cfg.gen_channels;
        let mut x = leaky_relu(
            &self.seed_fc.forward(o)?.reshape((bsz, 2 * d, 4, 4))?,
            SLOPE,
        )?;
        for blk in &self.stage1_blocks {
            x = blk.forward(&x)?;
        }
        let rgb = self.stage1_rgb.forward(&x)?.tanh()?;
        let feats = ImageFeatures::pool(&x, self.cfg.feature_grid)?;
        Ok((rgb, x, feats))
    }

    /// Context of the current words over the previous frame's regions,
    /// (B, D_i, N), with the weights β (B, N, L).
    pub fn copy_transform(
        &self,
        m: &Tensor,
        mask: &Tensor,
        prev: &ImageFeatures,
    ) -> Result<(Tensor, Tensor)> {
        region_word_attention(&self.copy_proj.forward(m)?, mask, &prev.0)
    }

    fn to_map(&self, ctx: &Tensor, side: usize) -> Result<Tensor> {
        let (b, c, _) = ctx.dims3()?;
        let g = self.cfg.feature_grid;
        let map = ctx.reshape((b, c, g, g))?;
        Ok(if side == g {
            map
        } else {
            map.upsample_nearest2d(side, side)?
        })
    }

    pub fn stage2(
        &self,
        low_map: &Tensor,
        stage1: &ImageFeatures,
        m: &Tensor,
        mask: &Tensor,
        copy_ctx: &Tensor,
    ) -> Result<(Tensor, ImageFeatures, Tensor)> {
        let side = low_map.dim(2)?;
        let (word_ctx, beta) = region_word_attention(&self.word_proj.forward(m)?, mask, &stage1.0)?;
        let joint = Tensor::cat(
            &[
                low_map.clone(),
                self.to_map(&word_ctx, side)?,
                self.to_map(copy_ctx, side)?,
            ],
            1,
        )?;
        let x = leaky_relu(&self.fuse.forward(&joint)?, SLOPE)?;
        let r = self
            .res_b
            .forward(&leaky_relu(&self.res_a.forward(&x)?, SLOPE)?)?;
        let x = leaky_relu(&(x + r)?, SLOPE)?;
        let x = self.up.forward(&x)?;
        let img = self.stage2_rgb.forward(&x)?.tanh()?;
        Ok((img, ImageFeatures::pool(&x, self.cfg.feature_grid)?, beta))
    }

    /// Generate one frame from its context and the previous frame's features.
    pub fn frame(
        &self,
        fc: &FrameContext,
        mask: &Tensor,
        prev: &ImageFeatures,
    ) -> Result<GeneratedFrame> {
        let (low_res, low_map, s1) = self.stage1(&fc.o)?;
        self.refine(fc, mask, prev, low_res, low_map, s1)
    }

    fn refine(
        &self,
        fc: &FrameContext,
        mask: &Tensor,
        prev: &ImageFeatures,
        low_res: Tensor,
        low_map: Tensor,
        s1: ImageFeatures,
    ) -> Result<GeneratedFrame> {
        let (mut copy_ctx, copy_beta) = self.copy_transform(&fc.m, mask, prev)?;
        if !self.cfg.copy_transform {
            copy_ctx = copy_ctx.zeros_like()?;
        }
        let (image, s2, beta) = self.stage2(&low_map, &s1, &fc.m, mask, &copy_ctx)?;
        Ok(GeneratedFrame {
            image,
            low_res,
            stage1_features: s1,
            stage2_features: s2,
            word_attention: beta,
            copy_attention: copy_beta,
        })
    }

    /// Full story: text encoding, story conditioning, context encoding and the
    /// frame loop where frame k copies from frame k−1 (frame 1 from zeros).
    pub fn generate(
        &self,
        tokens: &Tensor,
        mask: &Tensor,
        noise: &StoryNoise,
        ctx: &mut Ctx,
    ) -> Result<StoryOutput> {
        let (bsz, t, _) = tokens.dims3()?;
        if t != self.cfg.story_len {
            return Err(Error::shape(format!(
                "story has {t} captions, model expects {}",
                self.cfg.story_len
            )));
        }
        let emb = self.text.embed(tokens, mask)?;
        let dt = emb.words.dtype();
        let cond = self.story.encode(&emb.sentence, &noise.story)?;
        let contexts = self.context.encode(
            &emb.words,
            mask,
            &emb.sentence,
            &cond.h0,
            &noise.frames,
            ctx,
        )?;

        // Stage 1 has no cross-frame dependency, so run it once for all frames.
        let all_o = Tensor::stack(&contexts.iter().map(|c| c.o.clone()).collect::<Vec<_>>(), 1)?
            .reshape((bsz * t, ()))?;
        let (low_all, map_all, _) = self.stage1(&all_o)?;
        let (lc, ls) = (low_all.dim(1)?, low_all.dim(2)?);
        let (mc, ms) = (map_all.dim(1)?, map_all.dim(2)?);
        let low_all = low_all.reshape((bsz, t, lc, ls, ls))?;
        let map_all = map_all.reshape((bsz, t, mc, ms, ms))?;

        let mut prev = ImageFeatures::zeros(bsz, self.cfg.gen_channels, self.cfg.feature_grid, dt)?;
        let mut frames = Vec::with_capacity(t);
        for (k, fc) in contexts.iter().enumerate() {
            let mask_k = mask.narrow(1, k, 1)?.squeeze(1)?;
            let low = low_all.narrow(1, k, 1)?.squeeze(1)?;
            let map = map_all.narrow(1, k, 1)?.squeeze(1)?;
            let s1 = ImageFeatures::pool(&map, self.cfg.feature_grid)?;
            let f = self.refine(fc, &mask_k, &prev, low, map, s1)?;
            prev = f.stage2_features.clone();
            frames.push(f);
        }
        let images = Tensor::stack(
            &frames.iter().map(|f| f.image.clone()).collect::<Vec<_>>(),
            1,
        )?;
        Ok(StoryOutput {
            frames,
            contexts,
            cond,
            sentences: emb.sentence,
            images,
        })
    }
}

/// (B, T, 3, H, W) in [-1, 1] → per-story frame lists.
pub fn tensor_to_frames(images: &Tensor) -> Result<Vec<Vec<Frame>>> {
    let (b, t, _, h, w) = images.dims5()?;
    let vals: Vec<f32> = to_f64_vec(images)?.into_iter().map(|v| v as f32).collect();
    let per = 3 * h * w;
    Ok((0..b)
        .map(|i| {
            (0..t)
                .map(|k| {
                    let off = (i * t + k) * per;
                    Frame::from_unit_values(w as u32, h as u32, &vals[off..off + per])
                })
                .collect()
        })
        .collect())
}

/// One row per story, frames left to right, with a 2-pixel gutter.
pub fn story_grid(rows: &[Vec<Frame>]) -> Result<RgbImage> {
    const GAP: u32 = 2;
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Precondition("empty image grid".into()))?;
    let (fw, fh) = (first.width, first.height);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let width = cols * fw + (cols + 1) * GAP;
    let height = rows.len() as u32 * fh + (rows.len() as u32 + 1) * GAP;
    let mut img: RgbImage = ImageBuffer::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            if f.width != fw || f.height != fh {
                return Err(Error::shape("grid frames must share one size"));
            }
            let x0 = GAP + c as u32 * (fw + GAP);
            let y0 = GAP + r as u32 * (fh + GAP);
            for y in 0..fh {
                for x in 0..fw {
                    img.put_pixel(x0 + x, y0 + y, Rgb(f.pixel(x, y)));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_story_grid(rows: &[Vec<Frame>], path: &Path) -> Result<()> {
    story_grid(rows)?.save(path)?;
    Ok(())
}

/// Row-wise sum of β, used by attention checks.
pub fn attention_row_sums(beta: &Tensor) -> Result<Vec<f64>> {
    to_f64_vec(&beta.sum(D::Minus1)?)
}
