//! Character classifier trained from scratch on real frames. Its
//! penultimate layer is the feature extractor of the discriminative task.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::{character_scores, CharScores};
use crate::config::ClassifierConfig;
use crate::data::{Frame, StoryDataset};
use crate::discriminators::{char_bce, char_predictions};
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, scalar, to_f64_vec, Adam, Builder, Conv2d, Linear, ParamStore, Snapshot,
};

pub const SNAPSHOT_KIND: &str = "classifier";

pub struct CharClassifier {
    convs: Vec<Conv2d>,
    fc: Linear,
    out: Linear,
    frozen: bool,
    cfg: ClassifierConfig,
}

impl CharClassifier {
    pub fn new(store: &mut ParamStore, cfg: &ClassifierConfig) -> Result<Self> {
        let frozen = store.is_frozen();
        let mut b = store.root();
        Self::build(&mut b, cfg, frozen)
    }

    fn build(b: &mut Builder, cfg: &ClassifierConfig, frozen: bool) -> Result<Self> {
        let n = (cfg.image_size / 4).trailing_zeros() as usize;
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
            convs,
            fc: Linear::new(&mut b.sub("fc"), c_in * 16, cfg.feature_dim)?,
            out: Linear::new(&mut b.sub("out"), cfg.feature_dim, cfg.num_chars)?,
            frozen,
            cfg: cfg.clone(),
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    /// Penultimate features (N, feature_dim) for images (N, 3, H, W).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        let n = x.dim(0)?;
        leaky_relu(&self.fc.forward(&x.reshape((n, ()))?)?, 0.2)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.features(x)?)
    }

    /// 0/1 predictions at probability 0.5, in chunks to bound memory.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<u8>>> {
        let n = x.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(128) {
            let len = 128.min(n - start);
            out.extend(char_predictions(&self.logits(&x.narrow(0, start, len)?)?)?);
        }
        Ok(out)
    }

    pub fn feature_vectors(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let f = self.features(x)?;
        let d = f.dim(1)?;
        Ok(to_f64_vec(&f)?.chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn snapshot(&self, store: &ParamStore) -> Result<Snapshot> {
        let mut s = Snapshot::new(
            SNAPSHOT_KIND,
            json!({"config": self.cfg, "config_hash": self.cfg.hash()}),
        );
        s.insert_all("", store.tensors()?);
        Ok(s)
    }
}

pub fn load_classifier(
    path: &Path,
    cfg: &ClassifierConfig,
) -> Result<(ParamStore, CharClassifier)> {
    let snap = Snapshot::load(path)?;
    snap.expect_kind(SNAPSHOT_KIND)?;
    snap.expect_meta_str("config_hash", &cfg.hash())?;
    let mut store = ParamStore::from_tensors(DType::F32, snap.tensors)?;
    store.freeze();
    let c = CharClassifier::new(&mut store, cfg)?;
    Ok((store, c))
}

/// Frames stacked as (N, 3, H, W) in unit range.
pub fn frame_tensor(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Precondition("no frames".into()))?;
    let (w, h) = (first.width as usize, first.height as usize);
    let mut v = Vec::with_capacity(frames.len() * 3 * w * h);
    for f in frames {
        v.extend(f.unit_values());
    }
    Ok(Tensor::from_vec(v, (frames.len(), 3, h, w), &Device::Cpu)?)
}

fn labels_tensor(labels: &[&Vec<u8>]) -> Result<Tensor> {
    let c = labels[0].len();
    let v: Vec<f32> = labels
        .iter()
        .flat_map(|l| l.iter().map(|&x| x as f32))
        .collect();
    Ok(Tensor::from_vec(v, (labels.len(), c), &Device::Cpu)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_loss: Vec<f64>,
    pub held_out: CharScores,
    pub precision: f64,
    pub recall: f64,
}

pub fn evaluate_classifier(c: &CharClassifier, ds: &StoryDataset) -> Result<CharScores> {
    let frames: Vec<&Frame> = ds.stories.iter().flat_map(|s| s.frames.iter()).collect();
    let labels: Vec<Vec<u8>> = ds
        .stories
        .iter()
        .flat_map(|s| s.char_labels.iter().cloned())
        .collect();
    let preds = c.predict(&frame_tensor(&frames)?)?;
    character_scores(&preds, &labels)
}

/// Per-character BCE from scratch on ground-truth frames; returns the
/// frozen classifier and held-out scores on `val`.
pub fn train_char_classifier(
    train: &StoryDataset,
    val: &StoryDataset,
    cfg: &ClassifierConfig,
    tc: &ClassifierTrainConfig,
) -> Result<(ParamStore, CharClassifier, ClassifierReport)> {
    let frames: Vec<&Frame> = train.stories.iter().flat_map(|s| s.frames.iter()).collect();
    let labels: Vec<&Vec<u8>> = train
        .stories
        .iter()
        .flat_map(|s| s.char_labels.iter())
        .collect();
    if frames.is_empty() {
        return Err(Error::Precondition(
            "cannot train the classifier on an empty dataset".into(),
        ));
    }
    let mut store = ParamStore::new(DType::F32, tc.seed);
    let clf = CharClassifier::new(&mut store, cfg)?;
    let mut opt = Adam::new(&store, tc.lr, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xC1A5);
    let mut train_loss = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(tc.batch_size).collect();
        for idx in &chunks {
            let f: Vec<&Frame> = idx.iter().map(|&i| frames[i]).collect();
            let l: Vec<&Vec<u8>> = idx.iter().map(|&i| labels[i]).collect();
            let loss = char_bce(&clf.logits(&frame_tensor(&f)?)?, &labels_tensor(&l)?)?;
            sum += scalar(&loss)?;
            opt.step(&loss.backward()?)?;
        }
        train_loss.push(sum / chunks.len() as f64);
    }
    store.freeze();
    let clf = CharClassifier::new(&mut store, cfg)?;
    let held_out = evaluate_classifier(&clf, val)?;
    let report = ClassifierReport {
        precision: held_out.confusion.precision(),
        recall: held_out.confusion.recall(),
        train_loss,
        held_out,
    };
    Ok((store, clf, report))
}
