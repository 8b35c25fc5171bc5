use candle_core::{DType, Device, Tensor};

use super::{pad_to, Story, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Tensor view of B stories.
#[derive(Clone, Debug)]
pub struct StoryBatch {
    pub story_ids: Vec<String>,
    /// (B, T, 3, H, W) in [-1, 1].
    pub images: Tensor,
    /// (B, T, L) token ids, zero-padded.
    pub tokens: Tensor,
    /// (B, T, L), 1 for real tokens.
    pub mask: Tensor,
    /// (B, T, C) character labels as 0/1 floats.
    pub labels: Tensor,
}

impl StoryBatch {
    pub fn from_stories(stories: &[&Story], max_len: usize, dtype: DType) -> Result<Self> {
        let first = stories
            .first()
            .ok_or_else(|| Error::Precondition("empty story batch".into()))?;
        let (b, t) = (stories.len(), first.len());
        let (w, h) = (
            first.frames[0].width as usize,
            first.frames[0].height as usize,
        );
        let c = first.char_labels[0].len();
        let mut pix = Vec::with_capacity(b * t * 3 * w * h);
        let mut ids = Vec::with_capacity(b * t * max_len);
        let mut mask = Vec::with_capacity(b * t * max_len);
        let mut labels = Vec::with_capacity(b * t * c);
        for s in stories {
            if s.len() != t {
                return Err(Error::DataIntegrity {
                    story_id: s.id.clone(),
                    reason: format!("story has {} frames, batch expects {t}", s.len()),
                });
            }
            for k in 0..t {
                pix.extend(s.frames[k].unit_values());
                let (p, m) = pad_to(&s.captions[k], max_len);
                ids.extend(p);
                mask.extend(m);
                labels.extend(s.char_labels[k].iter().map(|&v| v as f32));
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            story_ids: stories.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::from_vec(pix, (b, t, 3, h, w), &dev)?.to_dtype(dtype)?,
            tokens: Tensor::from_vec(ids, (b, t, max_len), &dev)?,
            mask: Tensor::from_vec(mask, (b, t, max_len), &dev)?.to_dtype(dtype)?,
            labels: Tensor::from_vec(labels, (b, t, c), &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn story_len(&self) -> usize {
        self.images.dims()[1]
    }

    pub fn max_len(&self) -> usize {
        self.tokens.dims()[2]
    }
}

/// Teacher-forcing inputs and targets for the captioner:
/// input `[BOS, w1 .. wn]`, target `[w1 .. wn, EOS]`, with n ≤ L−1.
#[derive(Clone, Debug)]
pub struct CaptionerTargets {
    /// (B, T, L) decoder inputs.
    pub inputs: Tensor,
    /// (B, T, L) next-token targets.
    pub targets: Tensor,
    /// (B, T, L), 1 where a target exists.
    pub mask: Tensor,
}

impl CaptionerTargets {
    pub fn from_stories(stories: &[&Story], max_len: usize, dtype: DType) -> Result<Self> {
        let rows: Vec<&Vec<u32>> = stories.iter().flat_map(|s| s.captions.iter()).collect();
        let t = stories.first().map_or(0, |s| s.len());
        Self::from_token_rows(&rows, stories.len(), t, max_len, dtype)
    }

    pub fn from_token_rows(
        rows: &[&Vec<u32>],
        b: usize,
        t: usize,
        max_len: usize,
        dtype: DType,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::config("captioner needs max_len >= 2"));
        }
        let mut inputs = Vec::with_capacity(rows.len() * max_len);
        let mut targets = Vec::with_capacity(rows.len() * max_len);
        let mut mask = Vec::with_capacity(rows.len() * max_len);
        for cap in rows {
            let words: Vec<u32> = cap.iter().copied().take(max_len - 1).collect();
            let mut inp = vec![BOS];
            inp.extend(&words);
            let mut tgt = words.clone();
            tgt.push(EOS);
            let n = tgt.len();
            inp.resize(max_len, PAD);
            tgt.resize(max_len, PAD);
            inputs.extend(inp);
            targets.extend(tgt);
            mask.extend((0..max_len).map(|i| if i < n { 1f32 } else { 0.0 }));
        }
        let dev = Device::Cpu;
        Ok(Self {
            inputs: Tensor::from_vec(inputs, (b, t, max_len), &dev)?,
            targets: Tensor::from_vec(targets, (b, t, max_len), &dev)?,
            mask: Tensor::from_vec(mask, (b, t, max_len), &dev)?.to_dtype(dtype)?,
        })
    }
}
