//! Hierarchical image-text matching model for R-precision: word/sentence
//! matching losses per frame plus two story-level contrastive losses.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::DamsmConfig;
use crate::data::{Story, StoryBatch, StoryDataset};
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, log_softmax_last, masked_softmax, scalar, softmax_last, to_f64_vec, Adam, BiLstm,
    Conv2d, Embedding, Linear, ParamStore, Snapshot,
};

pub const SNAPSHOT_KIND: &str = "h_damsm";

pub struct HDamsm {
    cfg: DamsmConfig,
    words: Embedding,
    word_rnn: BiLstm,
    story_rnn: BiLstm,
    convs: Vec<Conv2d>,
    region_proj: Conv2d,
    global_proj: Linear,
    frozen: bool,
}

/// Encodings of B stories.
pub struct DamsmEncoding {
    /// (B·T, L, E) word features, zero at padding.
    pub words: Tensor,
    /// (B·T, L)
    pub mask: Tensor,
    /// (B·T, E)
    pub sentences: Tensor,
    /// (B·T, N, E)
    pub regions: Tensor,
    /// (B·T, E)
    pub frames: Tensor,
    /// (B, E) text story embedding.
    pub story_text: Tensor,
    /// (B, E) average of frame features.
    pub story_visual: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DamsmLosses {
    pub word: f64,
    pub sentence: f64,
    pub story: f64,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    // The epsilon sits inside the root: zero rows (padding) need a finite gradient.
    let n = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .affine(1.0, 1e-12)?
        .sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Symmetric cross-entropy of γ·scores with matches on the diagonal:
/// one term per direction, each averaged over the batch.
pub fn contrastive_loss(scores: &Tensor, gamma: f64) -> Result<(Tensor, Tensor)> {
    let n = scores.dim(0)?;
    if n < 2 {
        return Err(Error::Precondition(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    let eye = Tensor::eye(n, scores.dtype(), scores.device())?;
    let s = (scores * gamma)?;
    let a = (log_softmax_last(&s)? * &eye)?
        .sum_all()?
        .neg()?
        .affine(1.0 / n as f64, 0.0)?;
    let b = (log_softmax_last(&s.t()?.contiguous()?)? * &eye)?
        .sum_all()?
        .neg()?
        .affine(1.0 / n as f64, 0.0)?;
    Ok((a, b))
}

/// Story-level losses: P(t_i | v_i) ∝ exp(γ·cos(v_i, t_j)) over the batch,
/// cross-entropy in both directions. Inputs (B, E).
pub fn story_losses(visual: &Tensor, text: &Tensor, gamma: f64) -> Result<(Tensor, Tensor)> {
    let cos = l2_normalize(visual)?.matmul(&l2_normalize(text)?.t()?)?;
    contrastive_loss(&cos, gamma)
}

impl HDamsm {
    pub fn new(store: &mut ParamStore, cfg: &DamsmConfig) -> Result<Self> {
        if cfg.embed_dim % 2 != 0 {
            return Err(Error::config("damsm embed_dim must be even"));
        }
        let frozen = store.is_frozen();
        let mut b = store.root();
        let half = cfg.embed_dim / 2;
        let n = (cfg.image_size / cfg.region_grid).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n);
        let (mut c_in, mut c_out) = (3, cfg.conv_channels);
        for i in 0..n {
            convs.push(Conv2d::new(
                &mut b.sub(&format!("down{i}")),
                c_in,
                c_out,
                4,
                2,
                1,
            )?);
            c_in = c_out;
            c_out = (2 * c_out).min(8 * cfg.conv_channels);
        }
        Ok(Self {
            words: Embedding::new(&mut b.sub("words"), cfg.vocab_size, cfg.word_dim)?,
            word_rnn: BiLstm::new(&mut b.sub("word_rnn"), cfg.word_dim, half)?,
            story_rnn: BiLstm::new(&mut b.sub("story_rnn"), cfg.embed_dim, half)?,
            region_proj: Conv2d::new(&mut b.sub("region_proj"), c_in, cfg.embed_dim, 1, 1, 0)?,
            global_proj: Linear::new(&mut b.sub("global_proj"), c_in, cfg.embed_dim)?,
            convs,
            cfg: cfg.clone(),
            frozen,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &DamsmConfig {
        &self.cfg
    }

    /// Text side for `tokens` (B, T, L) and `mask` (B, T, L).
    pub fn encode_text(&self, tokens: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, l) = tokens.dims3()?;
        let tok = tokens.reshape((b * t, l))?;
        let m = mask.reshape((b * t, l))?;
        let out = self.word_rnn.forward(&self.words.forward(&tok)?, &m)?;
        let sentences = out.summary;
        let ones = Tensor::ones((b, t), sentences.dtype(), sentences.device())?;
        let story = self
            .story_rnn
            .forward(&sentences.reshape((b, t, ()))?, &ones)?
            .summary;
        Ok((out.states, sentences, story))
    }

    /// Image side for (M, 3, H, W): regions (M, N, E) and frame features (M, E).
    pub fn encode_images(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = x.clone();
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        let r = self.region_proj.forward(&x)?;
        let (m, e, h, w) = r.dims4()?;
        let regions = r.reshape((m, e, h * w))?.transpose(1, 2)?.contiguous()?;
        let global = self
            .global_proj
            .forward(&x.mean(D::Minus1)?.mean(D::Minus1)?)?;
        Ok((regions, global))
    }

    /// `images` (B, T, 3, H, W) with the matching captions.
    pub fn encode(&self, images: &Tensor, tokens: &Tensor, mask: &Tensor) -> Result<DamsmEncoding> {
        let (b, t, c, h, w) = images.dims5()?;
        let (words, sentences, story_text) = self.encode_text(tokens, mask)?;
        let (regions, frames) = self.encode_images(&images.reshape((b * t, c, h, w))?)?;
        let story_visual = frames.reshape((b, t, ()))?.mean(1)?;
        let l = tokens.dim(2)?;
        Ok(DamsmEncoding {
            words,
            mask: mask.reshape((b * t, l))?.to_dtype(images.dtype())?,
            sentences,
            regions,
            frames,
            story_text,
            story_visual,
        })
    }

    /// Word-level relevance R(Q_j, D_i) for every (text i, image j) pair,
    /// as a (M_text, M_img) matrix.
    pub fn word_scores(&self, words: &Tensor, mask: &Tensor, regions: &Tensor) -> Result<Tensor> {
        let (m, l, e) = words.dims3()?;
        let n = regions.dim(1)?;
        let c = &self.cfg;
        // s[i, j, w, r] = e_{i,w} · v_{j,r}
        let flat_w = words.reshape((m * l, e))?;
        let flat_r = regions.reshape((m * n, e))?;
        let s = flat_w
            .matmul(&flat_r.t()?)?
            .reshape((m, l, m, n))?
            .permute((0, 2, 1, 3))?
            .contiguous()?;
        // normalize over words (masked), then attend over regions
        let wmask = mask.reshape((m, 1, l, 1))?;
        let s_t = s.transpose(2, 3)?.contiguous()?;
        let s_bar = masked_softmax(&s_t, &mask.reshape((m, 1, 1, l))?)?
            .transpose(2, 3)?
            .contiguous()?;
        let alpha = softmax_last(&(s_bar * c.gamma1)?)?;
        let ctx = alpha.broadcast_matmul(&regions.unsqueeze(0)?)?;
        let cos = (l2_normalize(&ctx)?.broadcast_mul(&l2_normalize(words)?.unsqueeze(1)?)?)
            .sum(D::Minus1)?;
        // R = log(Σ_w exp(γ2 cos))^{1/γ2} over unmasked words
        let e_cos = ((cos * c.gamma2)?.exp()? * wmask.squeeze(3)?.broadcast_as((m, m, l))?)?;
        Ok((e_cos.sum(D::Minus1)?.log()? / c.gamma2)?)
    }

    pub fn losses(&self, enc: &DamsmEncoding) -> Result<(Tensor, Tensor, Tensor)> {
        let c = &self.cfg;
        let ws = self.word_scores(&enc.words, &enc.mask, &enc.regions)?;
        let (w0, w1) = contrastive_loss(&ws, c.gamma3)?;
        let ss = l2_normalize(&enc.sentences)?.matmul(&l2_normalize(&enc.frames)?.t()?)?;
        let (s0, s1) = contrastive_loss(&ss, c.gamma3)?;
        let (st0, st1) = story_losses(&enc.story_visual, &enc.story_text, c.story_gamma)?;
        Ok(((w0 + w1)?, (s0 + s1)?, (st0 + st1)?))
    }

    pub fn snapshot(&self, store: &ParamStore, vocab_hash: &str) -> Result<Snapshot> {
        let mut s = Snapshot::new(
            SNAPSHOT_KIND,
            json!({"config": self.cfg, "config_hash": self.cfg.hash(), "vocab_hash": vocab_hash}),
        );
        s.insert_all("", store.tensors()?);
        Ok(s)
    }

    /// Story embeddings (visual from `images`, text from captions) as rows.
    pub fn story_embeddings(
        &self,
        images: &Tensor,
        tokens: &Tensor,
        mask: &Tensor,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (b, t, c, h, w) = images.dims5()?;
        let (_, _, story_text) = self.encode_text(tokens, mask)?;
        let (_, frames) = self.encode_images(&images.reshape((b * t, c, h, w))?)?;
        let visual = frames.reshape((b, t, ()))?.mean(1)?;
        let e = self.cfg.embed_dim;
        let rows = |x: &Tensor| -> Result<Vec<Vec<f64>>> {
            Ok(to_f64_vec(x)?.chunks(e).map(<[f64]>::to_vec).collect())
        };
        Ok((rows(&visual)?, rows(&story_text)?))
    }
}

pub fn load_damsm(
    path: &Path,
    cfg: &DamsmConfig,
    vocab_hash: &str,
) -> Result<(ParamStore, HDamsm)> {
    let snap = Snapshot::load(path)?;
    snap.expect_kind(SNAPSHOT_KIND)?;
    snap.expect_meta_str("config_hash", &cfg.hash())?;
    snap.expect_meta_str("vocab_hash", vocab_hash)?;
    let mut store = ParamStore::from_tensors(DType::F32, snap.tensors)?;
    store.freeze();
    let m = HDamsm::new(&mut store, cfg)?;
    Ok((store, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamsmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DamsmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DamsmReport {
    pub epochs: Vec<DamsmLosses>,
}

pub fn train_h_damsm(
    train: &StoryDataset,
    cfg: &DamsmConfig,
    tc: &DamsmTrainConfig,
) -> Result<(ParamStore, HDamsm, DamsmReport)> {
    if tc.batch_size < 2 || train.len() < 2 {
        return Err(Error::Precondition(
            "H-DAMSM training needs batches of at least 2 stories".into(),
        ));
    }
    let mut store = ParamStore::new(DType::F32, tc.seed);
    let model = HDamsm::new(&mut store, cfg)?;
    let mut opt = Adam::new(&store, tc.lr, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xDA45);
    let mut report = DamsmReport { epochs: Vec::new() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut w, mut s, mut st, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(tc.batch_size).filter(|c| c.len() >= 2) {
            let refs: Vec<&Story> = idx.iter().map(|&i| &train.stories[i]).collect();
            let batch = StoryBatch::from_stories(&refs, cfg.max_caption_len, DType::F32)?;
            let enc = model.encode(&batch.images, &batch.tokens, &batch.mask)?;
            let (lw, ls, lst) = model.losses(&enc)?;
            let total = ((&lw + &ls)? + &lst)?;
            opt.step(&total.backward()?)?;
            w += scalar(&lw)?;
            s += scalar(&ls)?;
            st += scalar(&lst)?;
            n += 1;
        }
        let n = n.max(1) as f64;
        report.epochs.push(DamsmLosses {
            word: w / n,
            sentence: s / n,
            story: st / n,
        });
    }
    store.freeze();
    let model = HDamsm::new(&mut store, cfg)?;
    Ok((store, model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn story_loss_closed_form() {
        let v = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        let (a, b) = story_losses(&v, &v, 15.0).unwrap();
        let expect = -((15f64).exp() / ((15f64).exp() + 3.0)).ln();
        for x in [a, b] {
            let x = scalar(&x).unwrap();
            assert!((x - expect).abs() < 1e-12);
            assert!((x - 9.2e-7).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let v = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            story_losses(&v, &v, 15.0),
            Err(Error::Precondition(_))
        ));
    }
}
