//! Recurrent video captioner used as the frozen dual network and as the
//! BLEU evaluation captioner.
//!
//! At frame k the transformer sees `[memory ; N region tokens ; caption
//! tokens]`. Region tokens attend to regions only and caption tokens attend
//! causally, so nothing a caption token sees depends on later tokens.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::CaptionerConfig;
use crate::data::{CaptionerTargets, Story, StoryDataset, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::mart::{Mart, MemoryState};
use crate::nn::{
    leaky_relu, log_softmax_last, scalar, Adam, Builder, Conv2d, Ctx, Embedding, Init, Linear,
    ParamStore, Snapshot,
};

pub const SNAPSHOT_KIND: &str = "captioner";

/// Conv encoder from an image to an N×d_f region matrix.
pub struct RegionExtractor {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl RegionExtractor {
    pub fn new(
        b: &mut Builder,
        image_size: usize,
        grid: usize,
        channels: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let n = (image_size / grid).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n);
        let (mut c_in, mut c_out) = (3, channels);
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
            c_out = (2 * c_out).min(8 * channels);
        }
        Ok(Self {
            convs,
            head: Conv2d::new(&mut b.sub("head"), c_in, out_dim, 1, 1, 0)?,
        })
    }

    /// (B, 3, H, W) → (B, N, d_f).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        let f = self.head.forward(&x)?;
        let (b, d, h, w) = f.dims4()?;
        Ok(f.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
    }
}

pub struct Captioner {
    cfg: CaptionerConfig,
    pub regions: RegionExtractor,
    region_proj: Linear,
    words: Embedding,
    types: Tensor,
    pub mart: Mart,
    out: Linear,
    frozen: bool,
}

/// Token accuracy summary from greedy decoding against references.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl DecodeAccuracy {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl Captioner {
    pub fn new(store: &mut ParamStore, cfg: &CaptionerConfig) -> Result<Self> {
        cfg.validate()?;
        let frozen = store.is_frozen();
        let mut b = store.root();
        let h = cfg.mart.hidden_size;
        Ok(Self {
            regions: RegionExtractor::new(
                &mut b.sub("regions"),
                cfg.image_size,
                cfg.region_grid,
                cfg.conv_channels,
                cfg.region_dim,
            )?,
            region_proj: Linear::new(&mut b.sub("region_proj"), cfg.region_dim, h)?,
            words: Embedding::new(&mut b.sub("words"), cfg.vocab_size, h)?,
            types: b.param("types", &[2, h], Init::Normal(0.02))?,
            mart: Mart::new(&mut b.sub("mart"), &cfg.mart, None, None)?,
            out: Linear::new(&mut b.sub("out"), h, cfg.vocab_size)?,
            cfg: cfg.clone(),
            frozen,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// (1, N+L, N+L) allow matrix: regions see regions, caption token i sees
    /// all regions and caption tokens ≤ i.
    pub fn allow_matrix(n: usize, len: usize, dtype: DType) -> Result<Tensor> {
        let total = n + len;
        let mut v = vec![0f32; total * total];
        for r in 0..total {
            for c in 0..total {
                let ok = if r < n { c < n } else { c < n || c <= r };
                v[r * total + c] = f32::from(u8::from(ok));
            }
        }
        Ok(Tensor::from_vec(v, (1, total, total), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// One frame: `regions` (B, N, d_f), `inputs` (B, L) u32, `mask` (B, L).
    /// Returns log-probabilities (B, L, V) and the next memory.
    pub fn step(
        &self,
        regions: &Tensor,
        inputs: &Tensor,
        mask: &Tensor,
        mem: &MemoryState,
        ctx: &mut Ctx,
    ) -> Result<(Tensor, MemoryState)> {
        let (b, n, _) = regions.dims3()?;
        let len = inputs.dim(1)?;
        let dt = regions.dtype();
        let r = self
            .region_proj
            .forward(regions)?
            .broadcast_add(&self.types.narrow(0, 0, 1)?)?;
        let w = self
            .words
            .forward(inputs)?
            .broadcast_add(&self.types.narrow(0, 1, 1)?)?;
        let x = Tensor::cat(&[r, w], 1)?;
        let full_mask = Tensor::cat(
            &[
                Tensor::ones((b, n), dt, regions.device())?,
                mask.to_dtype(dt)?,
            ],
            1,
        )?;
        let allow = Self::allow_matrix(n, len, dt)?;
        let step = self
            .mart
            .step_embedded(&x, &full_mask, Some(&allow), mem, ctx)?;
        let text = step.encodings.narrow(1, n, len)?;
        Ok((log_softmax_last(&self.out.forward(&text)?)?, step.memory))
    }

    pub fn initial_memory(&self, batch: usize, dtype: DType) -> Result<MemoryState> {
        MemoryState::zeros(&self.cfg.mart, batch, dtype)
    }

    /// Teacher-forced log-probabilities (B, T, L, V) for `images`
    /// (B, T, 3, H, W) and decoder inputs (B, T, L).
    pub fn teacher_forced(
        &self,
        images: &Tensor,
        inputs: &Tensor,
        mask: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let (b, t, c, h, w) = images.dims5()?;
        let feats = self.regions.forward(&images.reshape((b * t, c, h, w))?)?;
        let n = feats.dim(1)?;
        let feats = feats.reshape((b, t, n, ()))?;
        let mut mem = self.initial_memory(b, images.dtype())?;
        let mut outs = Vec::with_capacity(t);
        for k in 0..t {
            let pick = |x: &Tensor| -> Result<Tensor> { Ok(x.narrow(1, k, 1)?.squeeze(1)?) };
            let (lp, next) = self.step(&pick(&feats)?, &pick(inputs)?, &pick(mask)?, &mem, ctx)?;
            outs.push(lp);
            mem = next;
        }
        Ok(Tensor::stack(&outs, 1)?)
    }

    /// Greedy decoding: per frame, rerun the step with the tokens chosen so
    /// far, then run the finished caption once more to advance the memory.
    /// Returns token ids without BOS, cut at EOS.
    pub fn greedy(&self, images: &Tensor) -> Result<Vec<Vec<Vec<u32>>>> {
        let (b, t, c, h, w) = images.dims5()?;
        let len = self.cfg.max_caption_len;
        let dt = images.dtype();
        let feats = self.regions.forward(&images.reshape((b * t, c, h, w))?)?;
        let n = feats.dim(1)?;
        let feats = feats.reshape((b, t, n, ()))?;
        let mut ctx = Ctx::eval();
        let mut mem = self.initial_memory(b, dt)?;
        let mut result = vec![Vec::with_capacity(t); b];
        for k in 0..t {
            let f = feats.narrow(1, k, 1)?.squeeze(1)?;
            let mut toks = vec![vec![PAD; len]; b];
            let mut lens = vec![1usize; b];
            let mut done = vec![false; b];
            for row in toks.iter_mut() {
                row[0] = BOS;
            }
            for pos in 0..len {
                if done.iter().all(|&d| d) {
                    break;
                }
                let (inp, mask) = Self::pack(&toks, &lens, dt)?;
                let (lp, _) = self.step(&f, &inp, &mask, &mem, &mut ctx)?;
                let best = lp
                    .narrow(1, pos, 1)?
                    .squeeze(1)?
                    .argmax(D::Minus1)?
                    .to_vec1::<u32>()?;
                for i in 0..b {
                    if done[i] {
                        continue;
                    }
                    if best[i] == EOS || pos + 1 == len {
                        done[i] = true;
                        if best[i] != EOS {
                            result[i].push(
                                toks[i][1..]
                                    .iter()
                                    .copied()
                                    .take(pos)
                                    .chain([best[i]])
                                    .collect(),
                            );
                        } else {
                            result[i].push(toks[i][1..=pos].to_vec());
                        }
                    } else {
                        toks[i][pos + 1] = best[i];
                        lens[i] = pos + 2;
                    }
                }
            }
            let (inp, mask) = Self::pack(&toks, &lens, dt)?;
            let (_, next) = self.step(&f, &inp, &mask, &mem, &mut ctx)?;
            mem = next;
        }
        Ok(result)
    }

    fn pack(toks: &[Vec<u32>], lens: &[usize], dt: DType) -> Result<(Tensor, Tensor)> {
        let (b, len) = (toks.len(), toks[0].len());
        let flat: Vec<u32> = toks.iter().flatten().copied().collect();
        let mask: Vec<f32> = lens
            .iter()
            .flat_map(|&l| (0..len).map(move |i| f32::from(u8::from(i < l))))
            .collect();
        Ok((
            Tensor::from_vec(flat, (b, len), &Device::Cpu)?,
            Tensor::from_vec(mask, (b, len), &Device::Cpu)?.to_dtype(dt)?,
        ))
    }

    pub fn snapshot(&self, store: &ParamStore, vocab: &Vocab) -> Result<Snapshot> {
        let mut s = Snapshot::new(
            SNAPSHOT_KIND,
            json!({
                "config": self.cfg,
                "config_hash": self.cfg.hash(),
                "vocab_hash": vocab.hash(),
            }),
        );
        s.insert_all("", store.tensors()?);
        Ok(s)
    }
}

/// Load a captioner snapshot, checking it against the expected config and
/// vocabulary. The returned store is frozen.
pub fn load_captioner(
    path: &Path,
    cfg: &CaptionerConfig,
    vocab: &Vocab,
) -> Result<(ParamStore, Captioner)> {
    let snap = Snapshot::load(path)?;
    snap.expect_kind(SNAPSHOT_KIND)?;
    snap.expect_meta_str("config_hash", &cfg.hash())?;
    snap.expect_meta_str("vocab_hash", &vocab.hash())?;
    let mut store = ParamStore::from_tensors(DType::F32, snap.tensors)?;
    store.freeze();
    let cap = Captioner::new(&mut store, cfg)?;
    Ok((store, cap))
}

/// Mean over unmasked (frame, token) positions of −log p(target).
/// `logp` (B, T, L, V), `targets` (B, T, L) u32, `mask` (B, T, L).
pub fn dual_nll(logp: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let picked = logp
        .gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?
        .squeeze(D::Minus1)?;
    let mask = mask.to_dtype(logp.dtype())?;
    let total = scalar(&mask.sum_all()?)?;
    if total < 0.5 {
        return Err(Error::Precondition(
            "dual loss over an empty target mask".into(),
        ));
    }
    Ok(((picked * mask)?.sum_all()?.neg()? / total)?)
}

/// L_dual for generated frames against ground-truth captions. The captioner
/// must be frozen; gradients reach only the images.
pub fn dual_loss(cap: &Captioner, images: &Tensor, targets: &CaptionerTargets) -> Result<Tensor> {
    if !cap.is_frozen() {
        return Err(Error::Contract(
            "dual loss requires a frozen captioner".into(),
        ));
    }
    let logp = cap.teacher_forced(images, &targets.inputs, &targets.mask, &mut Ctx::eval())?;
    dual_nll(&logp, &targets.targets, &targets.mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Validation stories used for the plateau check and accuracy report.
    pub val_stories: usize,
}

impl Default for CaptionerTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            patience: 2,
            seed: 0,
            val_stories: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionerReport {
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_token_accuracy: f64,
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

fn captioner_loss(
    cap: &Captioner,
    stories: &[&Story],
    max_len: usize,
    ctx: &mut Ctx,
) -> Result<Tensor> {
    let batch = crate::data::StoryBatch::from_stories(stories, max_len, DType::F32)?;
    let tg = CaptionerTargets::from_stories(stories, max_len, DType::F32)?;
    let logp = cap.teacher_forced(&batch.images, &tg.inputs, &tg.mask, ctx)?;
    dual_nll(&logp, &tg.targets, &tg.mask)
}

/// Greedy-decode accuracy over reference positions (words plus EOS).
pub fn decode_accuracy(
    cap: &Captioner,
    stories: &[&Story],
    max_len: usize,
) -> Result<DecodeAccuracy> {
    let mut acc = DecodeAccuracy::default();
    for chunk in stories.chunks(16) {
        let batch = crate::data::StoryBatch::from_stories(chunk, max_len, DType::F32)?;
        let decoded = cap.greedy(&batch.images)?;
        for (s, dec) in chunk.iter().zip(&decoded) {
            for (gt, hyp) in s.captions.iter().zip(dec) {
                let gt: Vec<u32> = gt.iter().copied().take(max_len - 1).chain([EOS]).collect();
                let hyp: Vec<u32> = hyp.iter().copied().chain([EOS]).collect();
                acc.total += gt.len();
                acc.correct += gt.iter().zip(&hyp).filter(|(a, b)| a == b).count();
            }
        }
    }
    Ok(acc)
}

/// Cross-entropy training on ground truth with a validation-plateau stop.
/// Returns the frozen store and its captioner.
pub fn pretrain_captioner(
    train: &StoryDataset,
    val: &StoryDataset,
    cfg: &CaptionerConfig,
    tc: &CaptionerTrainConfig,
) -> Result<(ParamStore, Captioner, CaptionerReport)> {
    if train.is_empty() {
        return Err(Error::Precondition(
            "cannot pretrain the captioner on an empty dataset".into(),
        ));
    }
    let mut store = ParamStore::new(DType::F32, tc.seed);
    let cap = Captioner::new(&mut store, cfg)?;
    let mut opt = Adam::new(&store, tc.lr, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xCA97);
    let val_refs: Vec<&Story> = val.stories.iter().take(tc.val_stories).collect();
    let l = cfg.max_caption_len;
    let mut report = CaptionerReport {
        epochs_run: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_token_accuracy: 0.0,
    };
    let mut best = f64::INFINITY;
    let mut best_tensors = store.tensors()?;
    let mut stale = 0;
    for _ in 0..tc.max_epochs {
        let mut sum = 0.0;
        let order = batches(train.len(), tc.batch_size, &mut rng);
        for idx in &order {
            let refs: Vec<&Story> = idx.iter().map(|&i| &train.stories[i]).collect();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng_next(&mut rng));
            let loss = captioner_loss(&cap, &refs, l, &mut Ctx::train(&mut drop_rng))?;
            sum += scalar(&loss)?;
            opt.step(&loss.backward()?)?;
        }
        report.epochs_run += 1;
        report.train_loss.push(sum / order.len() as f64);
        if val_refs.is_empty() {
            continue;
        }
        let mut vsum = 0.0;
        let chunks: Vec<&[&Story]> = val_refs.chunks(16).collect();
        for c in &chunks {
            vsum += scalar(&captioner_loss(&cap, c, l, &mut Ctx::eval())?)?;
        }
        let v = vsum / chunks.len() as f64;
        report.val_loss.push(v);
        if v < best - 1e-4 {
            best = v;
            best_tensors = store.tensors()?;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    if !val_refs.is_empty() {
        for (name, t) in &best_tensors {
            store.set(name, t)?;
        }
    }
    store.freeze();
    let cap = Captioner::new(&mut store, cfg)?;
    if !val_refs.is_empty() {
        report.val_token_accuracy = decode_accuracy(&cap, &val_refs, l)?.rate();
    }
    Ok((store, cap, report))
}

fn rng_next(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}
