//! Loss and metric values against closed forms, brute-force counts and
//! Monte-Carlo expectations.

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use storyviz::captioner::dual_nll;
use storyviz::discriminators::{discriminator_loss, generator_adv_loss};
use storyviz::eval::{
    character_scores, corpus_bleu, evaluate_discriminative, r_precision, R_PRECISION_RUNS,
};
use storyviz::nn::scalar;
use storyviz::par::Exec;
use storyviz::text_encoder::kl_divergence;

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
pub fn kl_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let d = rng.random_range(1..9);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..4.0)).collect();
        // KL of a diagonal Gaussian to N(0, I), one dimension at a time.
        let want: f64 = mu
            .iter()
            .zip(&var)
            .map(|(m, v)| 0.5 * (m * m + v - v.ln() - 1.0))
            .sum();
        let got = scalar(&kl_divergence(&t(mu, &[1, d]), &t(var, &[1, d])).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
pub fn adversarial_losses_at_half_are_log_two() {
    let half = t(vec![0.5; 6], &[6]);
    for got in [
        discriminator_loss(&half, &half).unwrap(),
        generator_adv_loss(&half, &half).unwrap(),
    ] {
        assert!((scalar(&got).unwrap() - 2f64.ln()).abs() < 1e-6);
    }
}

#[test]
pub fn dual_loss_of_uniform_is_log_v() {
    for v in [5usize, 37, 400] {
        let (b, tt, l) = (2, 3, 4);
        let logp = t(vec![-(v as f64).ln(); b * tt * l * v], &[b, tt, l, v]);
        let targets = Tensor::from_vec(
            (0..(b * tt * l) as u32)
                .map(|i| i % v as u32)
                .collect::<Vec<_>>(),
            (b, tt, l),
            &Device::Cpu,
        )
        .unwrap();
        let mut m = vec![1.0; b * tt * l];
        m[5] = 0.0;
        let got = scalar(&dual_nll(&logp, &targets, &t(m, &[b, tt, l])).unwrap()).unwrap();
        assert!((got - (v as f64).ln()).abs() < 1e-6);
    }
}

/// Set of (frame, character) positives.
fn positives(rows: &[Vec<u8>]) -> BTreeSet<(usize, usize)> {
    rows.iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.iter()
                .enumerate()
                .filter(|(_, &x)| x == 1)
                .map(move |(j, _)| (i, j))
        })
        .collect()
}

#[test]
pub fn micro_f1_matches_brute_force() {
    let cases: Vec<(Vec<Vec<u8>>, Vec<Vec<u8>>, f64)> = vec![
        // hand counts in the comments: tp, fp, fn
        (
            vec![vec![1, 0], vec![0, 1]],
            vec![vec![1, 0], vec![0, 1]],
            100.0,
        ), // 2, 0, 0
        (
            vec![vec![1, 1], vec![1, 1]],
            vec![vec![1, 0], vec![0, 0]],
            40.0,
        ), // 1, 3, 0
        (vec![vec![0, 0, 0]], vec![vec![1, 1, 0]], 0.0), // 0, 0, 2
        (
            vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 1]],
            vec![vec![1, 1, 0], vec![0, 1, 1], vec![1, 0, 1]],
            200.0 * 4.0 / 12.0,
        ), // 4, 2, 2
        (
            vec![vec![0, 0], vec![0, 0]],
            vec![vec![0, 0], vec![0, 0]],
            100.0,
        ), // nothing to find
    ];
    for (k, (pred, label, hand)) in cases.iter().enumerate() {
        let (p, l) = (positives(pred), positives(label));
        let tp = p.intersection(&l).count() as f64;
        let fp = p.difference(&l).count() as f64;
        let fn_ = l.difference(&p).count() as f64;
        let brute = if tp + fp + fn_ == 0.0 {
            100.0
        } else {
            200.0 * tp / (2.0 * tp + fp + fn_)
        };
        let got = character_scores(pred, label).unwrap().micro_f1;
        assert_eq!(got, brute, "case {k}");
        assert!((got - hand).abs() < 1e-12, "case {k}: {got} vs hand {hand}");
    }
}

#[test]
pub fn bleu_of_identical_corpus_is_100() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let corpus: Vec<Vec<u32>> = (0..50)
        .map(|_| {
            (0..rng.random_range(4..15))
                .map(|_| rng.random_range(0..30))
                .collect()
        })
        .collect();
    for n in [2, 3, 4] {
        assert!((corpus_bleu(&corpus, &corpus, n).unwrap() - 100.0).abs() < 1e-9);
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
pub fn discriminative_chance_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sets = 10_000;
    let queries: Vec<Vec<f64>> = (0..sets).map(|_| unit(&mut rng, 16)).collect();
    let cands: Vec<Vec<Vec<f64>>> = (0..sets)
        .map(|_| (0..5).map(|_| unit(&mut rng, 16)).collect())
        .collect();
    let answers: Vec<usize> = (0..sets).map(|_| rng.random_range(0..5)).collect();
    let (top1, top2) = evaluate_discriminative(&queries, &cands, &answers).unwrap();
    assert!((top1 - 20.0).abs() <= 2.0, "top1 {top1}");
    assert!((top2 - 40.0).abs() <= 2.0, "top2 {top2}");
}

#[test]
pub fn r_precision_chance_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1000;
    let visual: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 32)).collect();
    let text: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 32)).collect();
    let (mean, _) = r_precision(&visual, &text, R_PRECISION_RUNS, 5, Exec::Parallel).unwrap();
    assert!((mean - 1.0).abs() <= 0.5, "random R-precision {mean}");
    let (mean, std) = r_precision(&visual, &visual, R_PRECISION_RUNS, 5, Exec::Parallel).unwrap();
    assert_eq!((mean, std), (100.0, 0.0));
}
