//! Model-free metric definitions: character F1 / exact match, corpus BLEU,
//! cosine ranking for the discriminative task and R-precision.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Pooled confusion counts over (frame, character) decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// F1 in [0, 100]. With no positives predicted or present, agreement is
    /// perfect and the score is 100.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d == 0 {
            100.0
        } else {
            100.0 * self.tp as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            100.0
        } else {
            100.0 * self.tp as f64 / d as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharScores {
    pub micro_f1: f64,
    pub exact_match: f64,
    pub per_character_f1: Vec<f64>,
    pub confusion: Confusion,
}

/// Micro-F1, exact-match rate and per-character F1 for 0/1 predictions.
pub fn character_scores(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<CharScores> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predicted frames for {} labelled frames",
            preds.len(),
            labels.len()
        )));
    }
    let c = labels.first().map_or(0, Vec::len);
    let mut all = Confusion::default();
    let mut per = vec![Confusion::default(); c];
    let mut exact = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        if p.len() != c || l.len() != c {
            return Err(Error::shape("character vectors differ in length"));
        }
        if p == l {
            exact += 1;
        }
        for j in 0..c {
            all.add(p[j] != 0, l[j] != 0);
            per[j].add(p[j] != 0, l[j] != 0);
        }
    }
    let n = preds.len().max(1) as f64;
    Ok(CharScores {
        micro_f1: all.f1(),
        exact_match: 100.0 * exact as f64 / n,
        per_character_f1: per.iter().map(Confusion::f1).collect(),
        confusion: all,
    })
}

/// Added to zero clipped n-gram match counts.
pub const BLEU_EPSILON: f64 = 0.1;

fn ngrams(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-`max_n` in [0, 100] with one reference per hypothesis,
/// uniform weights, brevity penalty and add-epsilon smoothing of zero
/// match counts.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::shape("BLEU needs one reference per hypothesis"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 {
            return Ok(0.0);
        }
        let m = if matches[n] == 0 {
            BLEU_EPSILON
        } else {
            matches[n] as f64
        };
        log_p += (m / totals[n] as f64).ln() / max_n as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Domain error unless every component of every vector is finite.
pub fn check_finite(what: &str, rows: &[Vec<f64>]) -> Result<()> {
    if rows.iter().flatten().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contain non-finite values")))
    }
}

/// Zero-based rank of `answer` when candidates are sorted by descending
/// cosine similarity to `query`; ties go to the lower candidate index.
pub fn cosine_rank(query: &[f64], candidates: &[Vec<f64>], answer: usize) -> usize {
    let sims: Vec<f64> = candidates.iter().map(|c| cosine(query, c)).collect();
    let s = sims[answer];
    sims.iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < answer))
        .count()
}

/// Top-1 and top-2 accuracy (percent) from zero-based ranks.
pub fn top_k_rates(ranks: &[usize]) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let top1 = ranks.iter().filter(|&&r| r == 0).count() as f64;
    let top2 = ranks.iter().filter(|&&r| r <= 1).count() as f64;
    (100.0 * top1 / n, 100.0 * top2 / n)
}

pub const R_PRECISION_CANDIDATES: usize = 100;
pub const R_PRECISION_RUNS: usize = 10;

/// R-precision with R = 1: for each visual story embedding, rank its own
/// text embedding against 99 mismatched ones drawn without replacement.
/// Returns mean and sample standard deviation (percent) over the runs.
pub fn r_precision(
    visual: &[Vec<f64>],
    text: &[Vec<f64>],
    runs: usize,
    seed: u64,
    exec: Exec,
) -> Result<(f64, f64)> {
    let n = visual.len();
    if text.len() != n {
        return Err(Error::shape(
            "R-precision needs paired visual and text embeddings",
        ));
    }
    if n < R_PRECISION_CANDIDATES {
        return Err(Error::Precondition(format!(
            "R-precision needs at least {R_PRECISION_CANDIDATES} stories, corpus has {n}"
        )));
    }
    check_finite("visual embeddings", visual)?;
    check_finite("text embeddings", text)?;
    let scores: Vec<f64> = par::map_range(exec, runs, |run| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64 + 1);
        let mut hits = 0usize;
        for i in 0..n {
            let mut cands = vec![text[i].clone()];
            for j in index::sample(&mut rng, n - 1, R_PRECISION_CANDIDATES - 1) {
                let j = if j >= i { j + 1 } else { j };
                cands.push(text[j].clone());
            }
            if cosine_rank(&visual[i], &cands, 0) == 0 {
                hits += 1;
            }
        }
        100.0 * hits as f64 / n as f64
    });
    let mean = scores.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 {
        scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let l = vec![vec![1, 0, 1], vec![0, 0, 0]];
        let s = character_scores(&l, &l).unwrap();
        assert_eq!((s.micro_f1, s.exact_match), (100.0, 100.0));
    }

    #[test]
    fn toy_confusion() {
        // TP=4, FP=1, FN=2
        let labels = vec![vec![1, 1, 0], vec![1, 1, 0], vec![1, 1, 0]];
        let preds = vec![vec![1, 1, 1], vec![1, 0, 0], vec![1, 0, 0]];
        let s = character_scores(&preds, &labels).unwrap();
        assert_eq!((s.confusion.tp, s.confusion.fp, s.confusion.fn_), (4, 1, 2));
        assert!((s.micro_f1 - 800.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_bounds() {
        let refs = vec![vec![5, 6, 7, 8], vec![9, 10, 11]];
        assert!((corpus_bleu(&refs, &refs, 2).unwrap() - 100.0).abs() < 1e-9);
        assert!((corpus_bleu(&refs, &refs, 3).unwrap() - 100.0).abs() < 1e-9);
        let other = vec![vec![1, 2, 3, 4], vec![12, 13, 14]];
        assert!(corpus_bleu(&other, &refs, 2).unwrap() < 15.0);
    }

    #[test]
    fn bleu_matches_hand_count() {
        // hyp: a b c d, ref: a b d; 1-gram 3/4, 2-gram 1/3
        let h = vec![vec![1, 2, 3, 4]];
        let r = vec![vec![1, 2, 4]];
        let expect = 100.0 * ((0.75f64).ln() / 2.0 + (1.0f64 / 3.0).ln() / 2.0).exp();
        assert!((corpus_bleu(&h, &r, 2).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn rank_ties_go_to_lower_index() {
        let q = vec![1.0, 0.0];
        let c = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(cosine_rank(&q, &c, 0), 0);
        assert_eq!(cosine_rank(&q, &c, 1), 1);
        assert_eq!(cosine_rank(&q, &c, 2), 2);
    }

    #[test]
    fn r_precision_rejects_nan() {
        let mut v = vec![vec![1.0, 0.0]; 100];
        v[7][1] = f64::NAN;
        assert!(matches!(
            r_precision(&v, &v, 2, 0, Exec::Sequential),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn r_precision_rejects_small_corpus() {
        let v = vec![vec![1.0]; 50];
        assert!(matches!(
            r_precision(&v, &v, 10, 0, Exec::Sequential),
            Err(Error::Precondition(_))
        ));
    }
}
