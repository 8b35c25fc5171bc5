//! Attention normalisation and recurrence contracts on random instances.

mod common;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use storyviz::captioner::Captioner;
use storyviz::config::{CaptionerConfig, ModelConfig};
use storyviz::context_encoder::{attention_pool, ContextEncoder, FrameContext};
use storyviz::generator::{region_word_attention, Generator, ImageFeatures};
use storyviz::mart::{MemoryRecord, MemoryState};
use storyviz::nn::{randn, to_f64_vec, Ctx, ParamStore};

const INSTANCES: usize = 1000;

/// Random (B, L) mask with at least one kept position per row.
fn random_mask(rng: &mut ChaCha8Rng, b: usize, l: usize) -> (Tensor, Vec<f64>) {
    let mut v = vec![0f64; b * l];
    for row in v.chunks_mut(l) {
        for x in row.iter_mut() {
            *x = f64::from(u8::from(rng.random_bool(0.6)));
        }
        row[rng.random_range(0..l)] = 1.0;
    }
    (
        Tensor::from_vec(v.clone(), (b, l), &Device::Cpu).unwrap(),
        v,
    )
}

/// Rows of `w` (last dim L) sum to 1 and are exactly 0 where `mask` drops.
/// `row_mask(r)` gives the mask row for weight row r.
fn check_rows(w: &Tensor, mask: &[f64], l: usize, row_mask: impl Fn(usize) -> usize) {
    let v = to_f64_vec(w).unwrap();
    for (r, row) in v.chunks(l).enumerate() {
        let m = &mask[row_mask(r) * l..(row_mask(r) + 1) * l];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "row {r} sums to {sum}");
        for (x, keep) in row.iter().zip(m) {
            if *keep == 0.0 {
                assert_eq!(*x, 0.0, "masked position got weight {x}");
            }
        }
    }
}

#[test]
pub fn attention_pool_normalises() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let (b, l, h) = (
            rng.random_range(1..4),
            rng.random_range(1..9),
            rng.random_range(1..6),
        );
        let scale = rng.random_range(0.1..20.0);
        let enc = (randn(&mut rng, &[b, l, h], DType::F32).unwrap() * scale).unwrap();
        let u = randn(&mut rng, &[h], DType::F32).unwrap();
        let (mask, mv) = random_mask(&mut rng, b, l);
        let (_, alpha) = attention_pool(&enc, &mask, &u).unwrap();
        check_rows(&alpha, &mv, l, |r| r);
    }
}

#[test]
pub fn region_word_attention_normalises() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let (b, l, d, n) = (
            rng.random_range(1..4),
            rng.random_range(1..9),
            rng.random_range(1..6),
            rng.random_range(1..10),
        );
        let scale = rng.random_range(0.1..20.0);
        let words = (randn(&mut rng, &[b, l, d], DType::F32).unwrap() * scale).unwrap();
        let regions = randn(&mut rng, &[b, d, n], DType::F32).unwrap();
        let (mask, mv) = random_mask(&mut rng, b, l);
        let (_, beta) = region_word_attention(&words, &mask, &regions).unwrap();
        check_rows(&beta, &mv, l, |r| r / n);
    }
}

#[test]
pub fn copy_transform_normalises() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny_model(20);
    let mut store = ParamStore::new(DType::F32, 3);
    let g = Generator::new(&mut store.root(), &cfg).unwrap();
    let (h, d, grid) = (cfg.mart.hidden_size, cfg.gen_channels, cfg.feature_grid);
    let l = cfg.max_caption_len;
    for i in 0..INSTANCES {
        let b = rng.random_range(1..4);
        let m = (randn(&mut rng, &[b, l, h], DType::F32).unwrap() * rng.random_range(0.1..10.0))
            .unwrap();
        let (mask, mv) = random_mask(&mut rng, b, l);
        // Every tenth instance uses the all-zero first-frame features.
        let prev = if i % 10 == 0 {
            ImageFeatures::zeros(b, d, grid, DType::F32).unwrap()
        } else {
            ImageFeatures(randn(&mut rng, &[b, d, grid * grid], DType::F32).unwrap())
        };
        let (_, beta) = g.copy_transform(&m, &mask, &prev).unwrap();
        check_rows(&beta, &mv, l, |r| r / (grid * grid));
    }
}

fn context_setup() -> (ParamStore, ContextEncoder, ModelConfig) {
    let cfg = tiny_model(20);
    let mut store = ParamStore::new(DType::F32, 4);
    let enc = ContextEncoder::new(&mut store.root(), &cfg).unwrap();
    (store, enc, cfg)
}

struct ContextInputs {
    words: Tensor,
    mask: Tensor,
    sentences: Tensor,
    h0: Tensor,
    eps: Tensor,
}

fn context_inputs(rng: &mut ChaCha8Rng, cfg: &ModelConfig, b: usize) -> ContextInputs {
    let (t, l) = (cfg.story_len, cfg.max_caption_len);
    let (mask, _) = random_mask(rng, b * t, l);
    ContextInputs {
        words: randn(rng, &[b, t, l, cfg.word_dim], DType::F32).unwrap(),
        mask: mask.reshape((b, t, l)).unwrap(),
        sentences: randn(rng, &[b, t, cfg.sent_dim], DType::F32).unwrap(),
        h0: randn(rng, &[b, cfg.cond_dim], DType::F32).unwrap(),
        eps: randn(rng, &[b, t, cfg.sent_dim], DType::F32).unwrap(),
    }
}

/// Replace frames k.. of a (B, T, …) tensor with fresh noise.
fn perturb_from(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let t = x.dim(1).unwrap();
    let head = x.narrow(1, 0, k).unwrap();
    let mut dims = x.dims().to_vec();
    dims[1] = t - k;
    let tail = randn(rng, &dims, x.dtype()).unwrap();
    Tensor::cat(&[head, tail], 1).unwrap()
}

fn frame_values(fc: &FrameContext) -> Vec<Vec<f64>> {
    [&fc.m, &fc.alpha, &fc.c, &fc.g, &fc.o]
        .iter()
        .map(|t| to_f64_vec(t).unwrap())
        .collect()
}

#[test]
pub fn context_encoder_is_causal() {
    let (_s, enc, cfg) = context_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 1..cfg.story_len {
        let x = context_inputs(&mut rng, &cfg, 2);
        let base = enc
            .encode(
                &x.words,
                &x.mask,
                &x.sentences,
                &x.h0,
                &x.eps,
                &mut Ctx::eval(),
            )
            .unwrap();
        let words = perturb_from(&x.words, k, &mut rng);
        let sentences = perturb_from(&x.sentences, k, &mut rng);
        let eps = perturb_from(&x.eps, k, &mut rng);
        let alt = enc
            .encode(&words, &x.mask, &sentences, &x.h0, &eps, &mut Ctx::eval())
            .unwrap();
        for j in 0..k {
            assert_eq!(
                frame_values(&base[j]),
                frame_values(&alt[j]),
                "frame {j} moved when frames {k}.. changed"
            );
        }
        assert_ne!(frame_values(&base[k]), frame_values(&alt[k]));
    }
}

fn round_trip(mem: &MemoryState) -> MemoryState {
    let json = serde_json::to_string(&mem.to_record().unwrap()).unwrap();
    let rec: MemoryRecord = serde_json::from_str(&json).unwrap();
    MemoryState::from_record(&rec).unwrap()
}

#[test]
pub fn context_memory_restore_continues_identically() {
    let (_s, enc, cfg) = context_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = context_inputs(&mut rng, &cfg, 2);
    let full = enc
        .encode(
            &x.words,
            &x.mask,
            &x.sentences,
            &x.h0,
            &x.eps,
            &mut Ctx::eval(),
        )
        .unwrap();
    let pick = |t: &Tensor, k: usize| t.narrow(1, k, 1).unwrap().squeeze(1).unwrap();
    let mut mem = enc.initial_memory(&x.h0).unwrap();
    let mut q = Tensor::zeros((2, full[0].q.dim(1).unwrap()), DType::F32, &Device::Cpu).unwrap();
    for k in 0..cfg.story_len {
        if k == 1 {
            mem = round_trip(&mem);
        }
        let (fc, next) = enc
            .frame(
                &pick(&x.words, k),
                &pick(&x.mask, k),
                &pick(&x.sentences, k),
                &pick(&x.eps, k),
                &mem,
                &q,
                &mut Ctx::eval(),
            )
            .unwrap();
        assert_eq!(frame_values(&fc), frame_values(&full[k]), "frame {k}");
        q = fc.q.clone();
        mem = next;
    }
}

fn captioner_setup() -> (ParamStore, Captioner, CaptionerConfig) {
    let cfg = CaptionerConfig::tiny(20);
    let mut store = ParamStore::new(DType::F32, 7);
    let cap = Captioner::new(&mut store, &cfg).unwrap();
    (store, cap, cfg)
}

fn tokens(rng: &mut ChaCha8Rng, b: usize, t: usize, l: usize, vocab: u32) -> Tensor {
    let v: Vec<u32> = (0..b * t * l).map(|_| rng.random_range(4..vocab)).collect();
    Tensor::from_vec(v, (b, t, l), &Device::Cpu).unwrap()
}

fn ones(b: usize, t: usize, l: usize) -> Tensor {
    Tensor::ones((b, t, l), DType::F32, &Device::Cpu).unwrap()
}

#[test]
pub fn captioner_is_causal_across_frames() {
    let (_s, cap, cfg) = captioner_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, t, l, s) = (2, cfg.story_len, cfg.max_caption_len, cfg.image_size);
    let images = randn(&mut rng, &[b, t, 3, s, s], DType::F32)
        .unwrap()
        .tanh()
        .unwrap();
    let inputs = tokens(&mut rng, b, t, l, 20);
    let base = cap
        .teacher_forced(&images, &inputs, &ones(b, t, l), &mut Ctx::eval())
        .unwrap();
    for k in 1..t {
        let images2 = perturb_from(&images, k, &mut rng);
        let tail = tokens(&mut rng, b, t - k, l, 20);
        let inputs2 = Tensor::cat(&[inputs.narrow(1, 0, k).unwrap(), tail], 1).unwrap();
        let alt = cap
            .teacher_forced(&images2, &inputs2, &ones(b, t, l), &mut Ctx::eval())
            .unwrap();
        for j in 0..k {
            let a = to_f64_vec(&base.narrow(1, j, 1).unwrap()).unwrap();
            let c = to_f64_vec(&alt.narrow(1, j, 1).unwrap()).unwrap();
            assert_eq!(a, c, "frame {j} moved when frames {k}.. changed");
        }
    }
}

#[test]
pub fn captioner_is_causal_within_a_caption() {
    let (_s, cap, cfg) = captioner_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, l, s) = (2, cfg.max_caption_len, cfg.image_size);
    let images = randn(&mut rng, &[b, 3, s, s], DType::F32)
        .unwrap()
        .tanh()
        .unwrap();
    let regions = cap.regions.forward(&images).unwrap();
    let mem = cap.initial_memory(b, DType::F32).unwrap();
    let mask = Tensor::ones((b, l), DType::F32, &Device::Cpu).unwrap();
    let inputs = tokens(&mut rng, b, 1, l, 20).squeeze(1).unwrap();
    let (base, _) = cap
        .step(&regions, &inputs, &mask, &mem, &mut Ctx::eval())
        .unwrap();
    for i in 0..l - 1 {
        let tail = tokens(&mut rng, b, 1, l - i - 1, 20).squeeze(1).unwrap();
        let alt_in = Tensor::cat(&[inputs.narrow(1, 0, i + 1).unwrap(), tail], 1).unwrap();
        let (alt, _) = cap
            .step(&regions, &alt_in, &mask, &mem, &mut Ctx::eval())
            .unwrap();
        let a = to_f64_vec(&base.narrow(1, 0, i + 1).unwrap()).unwrap();
        let c = to_f64_vec(&alt.narrow(1, 0, i + 1).unwrap()).unwrap();
        assert_eq!(a, c, "positions ..={i} moved when later tokens changed");
    }
}

#[test]
pub fn captioner_memory_restore_continues_identically() {
    let (_s, cap, cfg) = captioner_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (b, t, l, s) = (2, cfg.story_len, cfg.max_caption_len, cfg.image_size);
    let images = randn(&mut rng, &[b, t, 3, s, s], DType::F32)
        .unwrap()
        .tanh()
        .unwrap();
    let inputs = tokens(&mut rng, b, t, l, 20);
    let mask = ones(b, t, l);
    let full = cap
        .teacher_forced(&images, &inputs, &mask, &mut Ctx::eval())
        .unwrap();
    let pick = |x: &Tensor, k: usize| x.narrow(1, k, 1).unwrap().squeeze(1).unwrap();
    let mut mem = cap.initial_memory(b, DType::F32).unwrap();
    for k in 0..t {
        if k == 1 {
            mem = round_trip(&mem);
        }
        let regions = cap.regions.forward(&pick(&images, k)).unwrap();
        let (lp, next) = cap
            .step(
                &regions,
                &pick(&inputs, k),
                &pick(&mask, k),
                &mem,
                &mut Ctx::eval(),
            )
            .unwrap();
        assert_eq!(
            to_f64_vec(&lp).unwrap(),
            to_f64_vec(&pick(&full, k)).unwrap(),
            "frame {k}"
        );
        mem = next;
    }
}
