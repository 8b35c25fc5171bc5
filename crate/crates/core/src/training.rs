//! Adversarial training: one step is an image-discriminator update, a
//! story-discriminator update and `g_updates_per_d` generator updates, each
//! on freshly sampled stories.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::captioner::{dual_nll, Captioner};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{CaptionerTargets, Story, StoryBatch, StoryDataset};
use crate::discriminators::{
    char_bce, discriminator_loss, generator_adv_loss, ImageDiscriminator, StoryDiscriminator,
};
use crate::error::{Error, Result};
use crate::eval::CharClassifier;
use crate::generator::{Generator, StoryNoise, StoryOutput};
use crate::nn::{scalar, to_f64_vec, Adam, AdamState, Ctx, ParamStore, Snapshot};
use crate::text_encoder::kl_loss;

pub const CHECKPOINT_KIND: &str = "gan_checkpoint";

/// One line of the loss log. Generator terms are averaged over the
/// generator updates of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_kl: f64,
    pub l_g_adv: f64,
    pub l_dual: f64,
    pub l_d_img: f64,
    pub l_d_story: f64,
    pub l_char: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn is_finite(&self) -> Option<&'static str> {
        [
            ("l_kl", self.l_kl),
            ("l_g_adv", self.l_g_adv),
            ("l_dual", self.l_dual),
            ("l_d_img", self.l_d_img),
            ("l_d_story", self.l_d_story),
            ("l_char", self.l_char),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Update counts per parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub d_img: u64,
    pub d_story: u64,
    pub g: u64,
}

/// Raw activations behind one generator update.
#[derive(Clone, Debug, Default)]
pub struct GTrace {
    pub img_fake: Vec<f64>,
    pub story_fake: Vec<f64>,
    /// (B, d_h) flattened.
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: usize,
    /// log p(target) and mask per (frame, token) position.
    pub target_logp: Vec<f64>,
    pub target_mask: Vec<f64>,
    pub grad_norm_sq: f64,
}

/// Raw activations behind one step, for recomputing the record.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub img_real: Vec<f64>,
    pub img_fake: Vec<f64>,
    pub char_logits: Vec<f64>,
    pub char_labels: Vec<f64>,
    pub story_real: Vec<f64>,
    pub story_fake: Vec<f64>,
    pub g: Vec<GTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: crate::nn::params::hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Snapshot("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub g_store: ParamStore,
    pub generator: Generator,
    pub di_store: ParamStore,
    pub img_disc: ImageDiscriminator,
    pub ds_store: ParamStore,
    pub story_disc: StoryDiscriminator,
    pub cap_store: ParamStore,
    pub captioner: Captioner,
    opt_g: Adam,
    opt_di: Adam,
    opt_ds: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
    pub counters: Counters,
    vocab_hash: String,
}

impl Trainer {
    /// `captioner` must come from a frozen store.
    pub fn new(
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        captioner: (ParamStore, Captioner),
        vocab_hash: &str,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let (cap_store, captioner) = captioner;
        if !cap_store.is_frozen() || !captioner.is_frozen() {
            return Err(Error::Contract(
                "GAN training needs a frozen captioner".into(),
            ));
        }
        let seed = train_cfg.seed;
        let mut g_store = ParamStore::new(DType::F32, seed.wrapping_mul(4).wrapping_add(1));
        let generator = Generator::new(&mut g_store.root(), model_cfg)?;
        let mut di_store = ParamStore::new(DType::F32, seed.wrapping_mul(4).wrapping_add(2));
        let img_disc = ImageDiscriminator::new(&mut di_store.root(), model_cfg)?;
        let mut ds_store = ParamStore::new(DType::F32, seed.wrapping_mul(4).wrapping_add(3));
        let story_disc = StoryDiscriminator::new(&mut ds_store.root(), model_cfg)?;
        let betas = train_cfg.betas;
        Ok(Self {
            opt_g: Adam::new(&g_store, train_cfg.lr_g, betas)?,
            opt_di: Adam::new(&di_store, train_cfg.lr_d, betas)?,
            opt_ds: Adam::new(&ds_store, train_cfg.lr_d, betas)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            model_cfg: model_cfg.clone(),
            train_cfg: train_cfg.clone(),
            g_store,
            generator,
            di_store,
            img_disc,
            ds_store,
            story_disc,
            cap_store,
            captioner,
            step: 0,
            counters: Counters::default(),
            vocab_hash: vocab_hash.to_string(),
        })
    }

    pub fn lr_g(&self) -> f64 {
        self.opt_g.lr()
    }

    pub fn lr_d(&self) -> f64 {
        self.opt_di.lr()
    }

    /// Apply the decay schedule for a zero-based epoch index.
    pub fn set_epoch(&mut self, epoch: usize) {
        let s = self.train_cfg.lr_scale(epoch);
        self.opt_g.set_lr(self.train_cfg.lr_g * s);
        self.opt_di.set_lr(self.train_cfg.lr_d * s);
        self.opt_ds.set_lr(self.train_cfg.lr_d * s);
    }

    fn sample_stories<'a>(&mut self, ds: &'a StoryDataset, n: usize) -> Vec<&'a Story> {
        let n = n.min(ds.len());
        index::sample(&mut self.rng, ds.len(), n)
            .into_iter()
            .map(|i| &ds.stories[i])
            .collect()
    }

    fn generate(&mut self, batch: &StoryBatch, train_mode: bool) -> Result<StoryOutput> {
        let noise = StoryNoise::sample(
            &mut self.rng,
            batch.batch_size(),
            &self.model_cfg,
            DType::F32,
        )?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        let mut ctx = if train_mode {
            Ctx::train(&mut drop_rng)
        } else {
            Ctx::eval()
        };
        self.generator
            .generate(&batch.tokens, &batch.mask, &noise, &mut ctx)
    }

    fn batch(&self, stories: &[&Story]) -> Result<StoryBatch> {
        StoryBatch::from_stories(stories, self.model_cfg.max_caption_len, DType::F32)
    }

    /// Flatten (B, T, …) to (B·T, …).
    fn frames(x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let bt = dims[0] * dims[1];
        dims.drain(..2);
        dims.insert(0, bt);
        Ok(x.reshape(dims)?)
    }

    /// Per-frame h0: (B, d_h) repeated over T.
    fn per_frame_h0(h0: &Tensor, t: usize) -> Result<Tensor> {
        let (b, d) = h0.dims2()?;
        Ok(h0
            .unsqueeze(1)?
            .broadcast_as((b, t, d))?
            .contiguous()?
            .reshape((b * t, d))?)
    }

    pub fn training_step(&mut self, ds: &StoryDataset) -> Result<(StepRecord, StepTrace)> {
        let t = self.model_cfg.story_len;
        let tc = self.train_cfg.clone();
        let mut trace = StepTrace::default();

        // (a) image discriminator on image_batch frames
        let n_img = tc.image_batch.div_ceil(t);
        let stories = self.sample_stories(ds, n_img);
        let batch = self.batch(&stories)?;
        let out = self.generate(&batch, true)?;
        let nf = tc.image_batch.min(batch.batch_size() * t);
        let take =
            |x: Tensor| -> Result<Tensor> { Ok(Self::frames(&x)?.narrow(0, 0, nf)?.detach()) };
        let real = take(batch.images.clone())?;
        let fake = take(out.images.clone())?;
        let s = take(out.sentences.clone())?;
        let h0 = Self::per_frame_h0(&out.cond.h0, t)?
            .narrow(0, 0, nf)?
            .detach();
        let labels = take(batch.labels.clone())?;
        let d_real = self.img_disc.forward(&real, &s, &h0)?;
        let d_fake = self.img_disc.forward(&fake, &s, &h0)?;
        let l_d_img = discriminator_loss(&d_real.prob, &d_fake.prob)?;
        let l_char = char_bce(&d_real.char_logits, &labels)?;
        let total = (&l_d_img + (&l_char * tc.lambda_char)?)?;
        trace.img_real = to_f64_vec(&d_real.prob)?;
        trace.img_fake = to_f64_vec(&d_fake.prob)?;
        trace.char_logits = to_f64_vec(&d_real.char_logits)?;
        trace.char_labels = to_f64_vec(&labels)?;
        self.opt_di.step(&total.backward()?)?;
        self.counters.d_img += 1;

        // (b) story discriminator
        let stories = self.sample_stories(ds, tc.story_batch);
        let batch = self.batch(&stories)?;
        let out = self.generate(&batch, true)?;
        let story = out.sentences.detach();
        let p_real = self.story_disc.forward(&batch.images, &story)?;
        let p_fake = self.story_disc.forward(&out.images.detach(), &story)?;
        let l_d_story = discriminator_loss(&p_real, &p_fake)?;
        trace.story_real = to_f64_vec(&p_real)?;
        trace.story_fake = to_f64_vec(&p_fake)?;
        self.opt_ds.step(&l_d_story.backward()?)?;
        self.counters.d_story += 1;

        // (c) generator updates on fresh batches
        let (mut kl_sum, mut adv_sum, mut dual_sum) = (0.0, 0.0, 0.0);
        for _ in 0..tc.g_updates_per_d {
            let stories = self.sample_stories(ds, tc.story_batch);
            let batch = self.batch(&stories)?;
            let targets = CaptionerTargets::from_stories(
                &stories,
                self.model_cfg.max_caption_len,
                DType::F32,
            )?;
            let out = self.generate(&batch, true)?;
            let fake = Self::frames(&out.images)?;
            let s = Self::frames(&out.sentences)?.detach();
            let h0 = Self::per_frame_h0(&out.cond.h0, t)?.detach();
            let d_img = self.img_disc.forward(&fake, &s, &h0)?;
            let d_story = self
                .story_disc
                .forward(&out.images, &out.sentences.detach())?;
            let l_adv = generator_adv_loss(&d_img.prob, &d_story)?;
            let l_kl = kl_loss(&out.cond)?;
            let logp = self.captioner.teacher_forced(
                &out.images,
                &targets.inputs,
                &targets.mask,
                &mut Ctx::eval(),
            )?;
            let l_dual = dual_nll(&logp, &targets.targets, &targets.mask)?;
            let total = ((&l_kl + &l_adv)? + (&l_dual * tc.lambda_dual)?)?;
            let grads = total.backward()?;
            let picked = logp
                .gather(
                    &targets.targets.unsqueeze(D::Minus1)?.contiguous()?,
                    D::Minus1,
                )?
                .squeeze(D::Minus1)?;
            trace.g.push(GTrace {
                img_fake: to_f64_vec(&d_img.prob)?,
                story_fake: to_f64_vec(&d_story)?,
                mu: to_f64_vec(&out.cond.mu)?,
                var: to_f64_vec(&out.cond.var)?,
                batch: batch.batch_size(),
                target_logp: to_f64_vec(&picked)?,
                target_mask: to_f64_vec(&targets.mask)?,
                grad_norm_sq: self.opt_g.grad_norm_sq(&grads)?,
            });
            self.opt_g.step(&grads)?;
            self.counters.g += 1;
            kl_sum += scalar(&l_kl)?;
            adv_sum += scalar(&l_adv)?;
            dual_sum += scalar(&l_dual)?;
        }
        let n = tc.g_updates_per_d as f64;
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            l_kl: kl_sum / n,
            l_g_adv: adv_sum / n,
            l_dual: dual_sum / n,
            l_d_img: scalar(&l_d_img)?,
            l_d_story: scalar(&l_d_story)?,
            l_char: scalar(&l_char)?,
            lr: self.opt_g.lr(),
        };
        Ok((rec, trace))
    }

    /// Deterministic story generation: same stories and seed, same frames.
    pub fn generate_eval(&self, stories: &[&Story], seed: u64) -> Result<StoryOutput> {
        generate_stories(&self.generator, &self.model_cfg, stories, seed)
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<Snapshot> {
        let opt = |a: &AdamState| json!({"steps": a.steps, "lr": a.lr});
        let (sg, si, ss) = (self.opt_g.state(), self.opt_di.state(), self.opt_ds.state());
        let mut snap = Snapshot::new(
            CHECKPOINT_KIND,
            json!({
                "model_config": self.model_cfg,
                "config_hash": self.model_cfg.hash(),
                "train_config": self.train_cfg,
                "captioner_hash": self.captioner.config().hash(),
                "captioner_checksum": self.cap_store.checksum()?,
                "vocab_hash": self.vocab_hash,
                "step": self.step,
                "epoch": epoch,
                "counters": self.counters,
                "rng": RngState::capture(&self.rng),
                "opt_g": opt(&sg),
                "opt_di": opt(&si),
                "opt_ds": opt(&ss),
            }),
        );
        snap.insert_all("g.", self.g_store.tensors()?);
        snap.insert_all("di.", self.di_store.tensors()?);
        snap.insert_all("ds.", self.ds_store.tensors()?);
        for (prefix, st) in [("opt_g", &sg), ("opt_di", &si), ("opt_ds", &ss)] {
            for (name, (m, v)) in &st.moments {
                snap.tensors.insert(format!("{prefix}.m.{name}"), m.clone());
                snap.tensors.insert(format!("{prefix}.v.{name}"), v.clone());
            }
        }
        Ok(snap)
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        self.checkpoint(epoch)?.save(path)
    }

    /// Rebuild a trainer from a checkpoint. The model config hash and the
    /// vocabulary must match; the captioner is supplied by the caller.
    pub fn load_checkpoint(
        path: &Path,
        model_cfg: &ModelConfig,
        captioner: (ParamStore, Captioner),
        vocab_hash: &str,
    ) -> Result<(Self, usize)> {
        let snap = Snapshot::load(path)?;
        snap.expect_kind(CHECKPOINT_KIND)?;
        snap.expect_meta_str("config_hash", &model_cfg.hash())?;
        snap.expect_meta_str("vocab_hash", vocab_hash)?;
        snap.expect_meta_str("captioner_hash", &captioner.1.config().hash())?;
        let train_cfg: TrainConfig = serde_json::from_value(snap.meta["train_config"].clone())?;
        let mut tr = Self::new(model_cfg, &train_cfg, captioner, vocab_hash)?;
        for (prefix, store) in [
            ("g.", &tr.g_store),
            ("di.", &tr.di_store),
            ("ds.", &tr.ds_store),
        ] {
            let group = snap.group(prefix);
            if group.len() != store.len() {
                return Err(Error::Snapshot(format!(
                    "checkpoint group `{prefix}` has the wrong parameter count"
                )));
            }
            for (name, t) in &group {
                store.set(name, t)?;
            }
        }
        for (prefix, opt) in [
            ("opt_g", &mut tr.opt_g),
            ("opt_di", &mut tr.opt_di),
            ("opt_ds", &mut tr.opt_ds),
        ] {
            let meta = &snap.meta[prefix];
            let m = snap.group(&format!("{prefix}.m."));
            let v = snap.group(&format!("{prefix}.v."));
            let moments: BTreeMap<String, (Tensor, Tensor)> = m
                .into_iter()
                .filter_map(|(k, mt)| v.get(&k).map(|vt| (k, (mt, vt.clone()))))
                .collect();
            opt.restore(&AdamState {
                steps: meta["steps"].as_u64().unwrap_or(0),
                lr: meta["lr"].as_f64().unwrap_or(0.0),
                moments,
            })?;
        }
        let rng: RngState = serde_json::from_value(snap.meta["rng"].clone())?;
        tr.rng = rng.restore()?;
        tr.step = snap.meta["step"].as_u64().unwrap_or(0);
        tr.counters = serde_json::from_value(snap.meta["counters"].clone())?;
        let epoch = snap.meta["epoch"].as_u64().unwrap_or(0) as usize;
        Ok((tr, epoch))
    }
}

/// Generate with a fixed seed in eval mode. Works on any generator, so a
/// loaded checkpoint reproduces the trainer's output.
pub fn generate_stories(
    gen: &Generator,
    cfg: &ModelConfig,
    stories: &[&Story],
    seed: u64,
) -> Result<StoryOutput> {
    let batch = StoryBatch::from_stories(stories, cfg.max_caption_len, DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = StoryNoise::sample(&mut rng, batch.batch_size(), cfg, DType::F32)?;
    gen.generate(&batch.tokens, &batch.mask, &noise, &mut Ctx::eval())
}

/// Load only the generator from a checkpoint (for generation and eval).
pub fn load_generator(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<(ParamStore, Generator, serde_json::Value)> {
    let snap = Snapshot::load(path)?;
    snap.expect_kind(CHECKPOINT_KIND)?;
    snap.expect_meta_str("config_hash", &cfg.hash())?;
    let mut store = ParamStore::from_tensors(DType::F32, snap.group("g."))?;
    store.freeze();
    let gen = Generator::new(&mut store.root(), cfg)?;
    Ok((store, gen, snap.meta))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub val_char_f1: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<String>,
    pub counters: Counters,
}

pub struct TrainPaths {
    pub out_dir: PathBuf,
}

impl TrainPaths {
    pub fn loss_log(&self) -> PathBuf {
        self.out_dir.join("losses.jsonl")
    }
    pub fn epoch_log(&self) -> PathBuf {
        self.out_dir.join("epochs.jsonl")
    }
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.out_dir.join(format!("checkpoint_e{epoch:03}.svz"))
    }
    pub fn latest(&self) -> PathBuf {
        self.out_dir.join("checkpoint_latest.svz")
    }
}

pub fn steps_per_epoch(tc: &TrainConfig, model: &ModelConfig, train_len: usize) -> u64 {
    tc.steps_per_epoch.unwrap_or_else(|| {
        let per_step = tc.image_batch.div_ceil(model.story_len).max(1);
        train_len.div_ceil(per_step).max(1) as u64
    })
}

fn append_json<T: Serialize>(file: &mut File, rec: &T) -> Result<()> {
    writeln!(file, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Run the schedule from the trainer's current position. `start_epoch` is
/// the number of completed epochs. Steps are logged to `losses.jsonl`,
/// per-epoch validation character F1 to `epochs.jsonl`.
pub fn train(
    tr: &mut Trainer,
    train_ds: &StoryDataset,
    val_ds: Option<&StoryDataset>,
    classifier: Option<&CharClassifier>,
    paths: &TrainPaths,
    start_epoch: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    fs::create_dir_all(&paths.out_dir)?;
    let tc = tr.train_cfg.clone();
    let spe = steps_per_epoch(&tc, &tr.model_cfg, train_ds.len());
    let mut total = spe * tc.epochs as u64;
    if let Some(m) = tc.max_steps {
        total = total.min(m);
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.loss_log())?;
    let mut elog = OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.epoch_log())?;
    let mut summary = TrainSummary {
        steps: tr.step,
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        counters: tr.counters,
    };
    let mut epoch = start_epoch;
    tr.set_epoch(epoch);
    while tr.step < total {
        let (rec, _) = tr.training_step(train_ds)?;
        if let Some(name) = rec.is_finite() {
            let diag = paths
                .out_dir
                .join(format!("nonfinite_step{}.svz", rec.step));
            tr.save_checkpoint(&diag, epoch)?;
            append_json(&mut log, &rec)?;
            return Err(Error::NonFinite {
                name: name.into(),
                step: rec.step,
                snapshot: diag.display().to_string(),
            });
        }
        append_json(&mut log, &rec)?;
        on_step(&rec);
        let finished_epoch = tr.step % spe == 0 || tr.step == total;
        if finished_epoch {
            epoch += 1;
            let val_char_f1 = match (val_ds, classifier) {
                (Some(v), Some(c)) if tc.val_stories > 0 => {
                    let n = tc.val_stories.min(v.len());
                    Some(crate::eval::generated_char_f1(
                        tr,
                        c,
                        &v.subset(0..n),
                        tc.seed,
                    )?)
                }
                _ => None,
            };
            let mut checkpoint = None;
            if tc.is_checkpoint_epoch(epoch) || tr.step == total {
                let p = paths.checkpoint(epoch);
                tr.save_checkpoint(&p, epoch)?;
                tr.save_checkpoint(&paths.latest(), epoch)?;
                summary.checkpoints.push(p.display().to_string());
                checkpoint = Some(p.display().to_string());
            }
            let er = EpochRecord {
                epoch,
                step: tr.step,
                lr: tr.lr_g(),
                val_char_f1,
                checkpoint,
            };
            append_json(&mut elog, &er)?;
            summary.epochs.push(er);
            tr.set_epoch(epoch);
        }
    }
    summary.steps = tr.step;
    summary.counters = tr.counters;
    Ok(summary)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
