//! Automatic evaluation: character classification, captioning BLEU,
//! discriminative ranking and R-precision, assembled into a `MetricReport`.

pub mod classifier;
pub mod damsm;
pub mod metrics;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use classifier::{
    evaluate_classifier, frame_tensor, load_classifier, train_char_classifier, CharClassifier,
    ClassifierReport, ClassifierTrainConfig,
};
pub use damsm::{load_damsm, train_h_damsm, DamsmReport, DamsmTrainConfig, HDamsm};
pub use metrics::{
    character_scores, corpus_bleu, cosine, cosine_rank, r_precision, top_k_rates, CharScores,
    Confusion, R_PRECISION_RUNS,
};

use crate::captioner::Captioner;
use crate::config::ModelConfig;
use crate::data::{build_discriminative_sets, Frame, Story, StoryDataset};
use crate::error::{Error, Result};
use crate::generator::{tensor_to_frames, Generator};
use crate::par::{self, Exec};
use crate::training::{generate_stories, Trainer};

/// Stories generated per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;
pub const NUM_NEGATIVES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint: String,
    pub split: String,
    pub seed: u64,
    pub stories: usize,
    pub disc_sets: usize,
    pub disc_skipped: usize,
}

/// Field order is the serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub char_f1: f64,
    pub char_exact_match: f64,
    pub per_character_f1: Vec<f64>,
    pub bleu2: f64,
    pub bleu3: f64,
    pub disc_top1: f64,
    pub disc_top2: f64,
    pub r_precision_mean: f64,
    pub r_precision_std: f64,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    /// Every rate lies in [0, 100].
    pub fn rates_in_range(&self) -> bool {
        let ok = |x: f64| (0.0..=100.0).contains(&x);
        [
            self.char_f1,
            self.char_exact_match,
            self.bleu2,
            self.bleu3,
            self.disc_top1,
            self.disc_top2,
            self.r_precision_mean,
        ]
        .into_iter()
        .chain(self.per_character_f1.iter().copied())
        .all(ok)
    }
}

/// One generated frame as seen by the metric models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub story_id: String,
    pub frame: usize,
    pub predicted: Vec<u8>,
    pub label: Vec<u8>,
    pub caption: Vec<u32>,
    pub reference: Vec<u32>,
}

/// Frozen metric models. A `None` entry fails `full_report` by name.
#[derive(Default)]
pub struct MetricModels<'a> {
    pub classifier: Option<&'a CharClassifier>,
    pub captioner: Option<&'a Captioner>,
    pub damsm: Option<&'a HDamsm>,
}

fn require<'a, T>(m: Option<&'a T>, name: &str) -> Result<&'a T> {
    m.ok_or_else(|| Error::MissingModel(name.into()))
}

/// Top-1 and top-2 rates: each query ranks its candidates by cosine
/// similarity, `answers[i]` is the true candidate of query i.
pub fn evaluate_discriminative(
    queries: &[Vec<f64>],
    candidates: &[Vec<Vec<f64>>],
    answers: &[usize],
) -> Result<(f64, f64)> {
    if queries.len() != candidates.len() || queries.len() != answers.len() {
        return Err(Error::shape("discriminative inputs differ in length"));
    }
    metrics::check_finite("query features", queries)?;
    for c in candidates {
        metrics::check_finite("candidate features", c)?;
    }
    let ranks: Vec<usize> = queries
        .iter()
        .zip(candidates)
        .zip(answers)
        .map(|((q, c), &a)| cosine_rank(q, c, a))
        .collect();
    Ok(top_k_rates(&ranks))
}

/// Character micro-F1 of frames generated for `ds` by the trainer's generator.
pub fn generated_char_f1(
    tr: &Trainer,
    c: &CharClassifier,
    ds: &StoryDataset,
    seed: u64,
) -> Result<f64> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let stories: Vec<&Story> = ds.stories.iter().collect();
    for (i, chunk) in stories.chunks(EVAL_CHUNK).enumerate() {
        let out = tr.generate_eval(chunk, seed.wrapping_add(i as u64))?;
        preds.extend(c.predict(&flatten_frames(&out.images)?)?);
        labels.extend(chunk.iter().flat_map(|s| s.char_labels.iter().cloned()));
    }
    Ok(character_scores(&preds, &labels)?.micro_f1)
}

fn flatten_frames(images: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = images.dims5()?;
    Ok(images.reshape((b * t, c, h, w))?)
}

/// Generate every story of `ds` and score it with all metric models.
/// Returns the report and the per-frame prediction dump it was computed from.
pub fn full_report(
    gen: &Generator,
    cfg: &ModelConfig,
    ds: &StoryDataset,
    models: &MetricModels,
    meta: (&str, &str),
    seed: u64,
    exec: Exec,
) -> Result<(MetricReport, Vec<FramePrediction>)> {
    let clf = require(models.classifier, "classifier")?;
    let cap = require(models.captioner, "captioner")?;
    let damsm = require(models.damsm, "damsm")?;
    if ds.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty split".into()));
    }

    let stories: Vec<&Story> = ds.stories.iter().collect();
    let mut dump = Vec::with_capacity(ds.len() * ds.story_len());
    let mut generated: Vec<Vec<Frame>> = Vec::with_capacity(ds.len());
    let mut visual = Vec::with_capacity(ds.len());
    let mut text = Vec::with_capacity(ds.len());
    let dcfg = damsm.config();
    for (i, chunk) in stories.chunks(EVAL_CHUNK).enumerate() {
        let out = generate_stories(gen, cfg, chunk, seed.wrapping_add(i as u64))?;
        let preds = clf.predict(&flatten_frames(&out.images)?)?;
        let captions = cap.greedy(&out.images)?;
        let batch =
            crate::data::StoryBatch::from_stories(chunk, dcfg.max_caption_len, out.images.dtype())?;
        let (v, t) = damsm.story_embeddings(&out.images, &batch.tokens, &batch.mask)?;
        visual.extend(v);
        text.extend(t);
        let mut p = preds.into_iter();
        for (s, caps) in chunk.iter().zip(captions) {
            for (k, hyp) in caps.into_iter().enumerate() {
                dump.push(FramePrediction {
                    story_id: s.id.clone(),
                    frame: k,
                    predicted: p.next().ok_or_else(|| Error::shape("missing prediction"))?,
                    label: s.char_labels[k].clone(),
                    caption: hyp,
                    reference: s.captions[k].clone(),
                });
            }
        }
        generated.extend(tensor_to_frames(&out.images)?);
    }

    let preds: Vec<Vec<u8>> = dump.iter().map(|f| f.predicted.clone()).collect();
    let labels: Vec<Vec<u8>> = dump.iter().map(|f| f.label.clone()).collect();
    let chars = character_scores(&preds, &labels)?;
    let hyps: Vec<Vec<u32>> = dump.iter().map(|f| f.caption.clone()).collect();
    let refs: Vec<Vec<u32>> = dump.iter().map(|f| f.reference.clone()).collect();
    let bleu2 = corpus_bleu(&hyps, &refs, 2)?;
    let bleu3 = corpus_bleu(&hyps, &refs, 3)?;

    let sets = build_discriminative_sets(ds, NUM_NEGATIVES, seed);
    let per_set = par::try_map_range(
        exec,
        sets.sets.len(),
        |i| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let set = &sets.sets[i];
            let last = &generated[set.target.story][set.target.frame];
            let q = clf.feature_vectors(&frame_tensor(&[last])?)?.remove(0);
            let c = clf.feature_vectors(&frame_tensor(&set.candidate_frames(ds))?)?;
            Ok((q, c))
        },
    )?;
    let answers: Vec<usize> = sets.sets.iter().map(|s| s.answer_index).collect();
    let (queries, cands): (Vec<_>, Vec<_>) = per_set.into_iter().unzip();
    let (disc_top1, disc_top2) = evaluate_discriminative(&queries, &cands, &answers)?;

    let (r_mean, r_std) = r_precision(&visual, &text, R_PRECISION_RUNS, seed, exec)?;

    let report = MetricReport {
        char_f1: chars.micro_f1,
        char_exact_match: chars.exact_match,
        per_character_f1: chars.per_character_f1,
        bleu2,
        bleu3,
        disc_top1,
        disc_top2,
        r_precision_mean: r_mean,
        r_precision_std: r_std,
        metadata: ReportMetadata {
            checkpoint: meta.0.into(),
            split: meta.1.into(),
            seed,
            stories: ds.len(),
            disc_sets: sets.sets.len(),
            disc_skipped: sets.skipped.len(),
        },
    };
    Ok((report, dump))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_query_ranks_first() {
        let c = vec![vec![vec![0.0, 1.0], vec![1.0, 0.2], vec![0.5, 0.5]]];
        let (t1, t2) = evaluate_discriminative(&[vec![1.0, 0.2]], &c, &[1]).unwrap();
        assert_eq!((t1, t2), (100.0, 100.0));
    }

    #[test]
    fn missing_model_is_named() {
        let Err(e) = require::<CharClassifier>(None, "classifier") else {
            panic!("expected an error")
        };
        assert!(e.to_string().contains("classifier"));
    }
}
