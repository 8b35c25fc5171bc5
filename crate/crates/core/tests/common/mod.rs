#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use storyviz::captioner::Captioner;
use storyviz::config::{
    CaptionerConfig, ClassifierConfig, DamsmConfig, ModelConfig, Preset, TrainConfig,
};
use storyviz::data::{generate_shape_story_splits, SplitDatasets, SynthConfig};
use storyviz::nn::ParamStore;
use storyviz::par::Exec;
use storyviz::training::Trainer;

pub const TINY_T: usize = 3;
pub const TINY_SIZE: u32 = 16;

pub fn tiny_splits(num_stories: usize, seed: u64) -> SplitDatasets {
    let cfg = SynthConfig {
        num_stories,
        story_len: TINY_T,
        image_size: TINY_SIZE,
        max_caption_len: 16,
        exec: Exec::Sequential,
        ..SynthConfig::default()
    };
    generate_shape_story_splits(&cfg, seed).unwrap()
}

pub fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig::tiny(vocab)
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        image_batch: 6,
        story_batch: 2,
        seed,
        val_stories: 0,
        ..TrainConfig::preset(Preset::Desk)
    }
}

pub fn tiny_classifier() -> ClassifierConfig {
    ClassifierConfig {
        image_size: TINY_SIZE as usize,
        num_chars: 9,
        conv_channels: 4,
        feature_dim: 8,
    }
}

pub fn tiny_damsm(vocab: usize) -> DamsmConfig {
    DamsmConfig {
        image_size: TINY_SIZE as usize,
        story_len: TINY_T,
        max_caption_len: 6,
        vocab_size: vocab,
        word_dim: 6,
        embed_dim: 8,
        conv_channels: 4,
        region_grid: 4,
        ..DamsmConfig::preset(Preset::Desk, vocab)
    }
}

/// A randomly initialised captioner in a frozen store.
pub fn frozen_captioner(vocab: usize, dtype: DType, seed: u64) -> (ParamStore, Captioner) {
    let cfg = CaptionerConfig::tiny(vocab);
    let mut store = ParamStore::new(dtype, seed);
    Captioner::new(&mut store, &cfg).unwrap();
    store.freeze();
    let cap = Captioner::new(&mut store, &cfg).unwrap();
    (store, cap)
}

pub fn tiny_trainer(vocab: usize, tc: &TrainConfig, vocab_hash: &str) -> Trainer {
    let cap = frozen_captioner(vocab, DType::F32, 77);
    Trainer::new(&tiny_model(vocab), tc, cap, vocab_hash).unwrap()
}

/// Value of one flat element of a parameter.
pub fn get_elem(store: &ParamStore, name: &str, idx: usize) -> f64 {
    let t = store.get(name).unwrap().as_tensor().flatten_all().unwrap();
    t.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[idx]
}

pub fn set_elem(store: &ParamStore, name: &str, idx: usize, value: f64) {
    let var = store.get(name).unwrap();
    let t = var.as_tensor();
    let mut v = t
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    v[idx] = value;
    let new = Tensor::from_vec(v, t.dims(), t.device())
        .unwrap()
        .to_dtype(t.dtype())
        .unwrap();
    var.set(&new).unwrap();
}

pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Gradients smaller than this are compared absolutely: rounding in the
/// difference quotient is about 1e-15·|loss|/h.
pub const GRAD_FLOOR: f64 = 1e-4;

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(GRAD_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn central(
    store: &ParamStore,
    name: &str,
    index: usize,
    h: f64,
    loss: &impl Fn() -> Tensor,
) -> f64 {
    let x0 = get_elem(store, name, index);
    set_elem(store, name, index, x0 + h);
    let up = scalar(&loss());
    set_elem(store, name, index, x0 - h);
    let down = scalar(&loss());
    set_elem(store, name, index, x0);
    (up - down) / (2.0 * h)
}

/// Central differences at `n` random elements of `store` (restricted to
/// names containing `filter`) against the autodiff gradient of `loss`.
///
/// Leaky ReLUs make the loss piecewise smooth. An element whose quotient at
/// `h` and `h/4` disagree has a kink inside the stencil and is resampled;
/// at most three in four draws may be discarded this way.
pub fn grad_check(
    store: &ParamStore,
    filter: &str,
    n: usize,
    seed: u64,
    h: f64,
    loss: impl Fn() -> Tensor,
) -> Vec<GradCheck> {
    let l = loss();
    let grads = l.backward().unwrap();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.contains(filter))
        .map(str::to_string)
        .collect();
    assert!(!names.is_empty(), "no parameters match `{filter}`");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let (mut tries, mut kinks) = (0, 0);
    while out.len() < n && tries < 50 * n {
        tries += 1;
        let name = &names[rng.random_range(0..names.len())];
        let var = store.get(name).unwrap();
        let count = var.as_tensor().elem_count();
        let index = rng.random_range(0..count);
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let analytic = g
            .flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[index];
        let numeric = central(store, name, index, h, &loss);
        let quarter = central(store, name, index, h / 4.0, &loss);
        if (numeric - quarter).abs() > 5e-5 * numeric.abs().max(quarter.abs()).max(GRAD_FLOOR) {
            kinks += 1;
            continue;
        }
        out.push(GradCheck {
            name: name.clone(),
            index,
            analytic,
            numeric,
        });
    }
    assert!(
        kinks <= 3 * out.len(),
        "{kinks} non-smooth draws against {} smooth ones",
        out.len()
    );
    out
}

pub fn scalar(t: &Tensor) -> f64 {
    storyviz::nn::scalar(t).unwrap()
}
