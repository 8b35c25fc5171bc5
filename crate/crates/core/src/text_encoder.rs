//! Word and sentence embeddings, and the story encoder that samples the
//! conditioning vector h0 from a learned diagonal Gaussian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Tensor, D};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{masked_mean, Builder, Embedding, Linear, ParamStore};

pub struct TextEncoder {
    embedding: Embedding,
    proj: Linear,
}

/// Output of [`TextEncoder::embed`].
pub struct CaptionEmbedding {
    /// (…, L, d_w), exactly zero at padded positions.
    pub words: Tensor,
    /// (…, d_s): projection of the mask-aware mean of the word vectors.
    pub sentence: Tensor,
}

impl TextEncoder {
    pub fn new(
        b: &mut Builder,
        vocab_size: usize,
        word_dim: usize,
        sent_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            embedding: Embedding::new(&mut b.sub("embedding"), vocab_size, word_dim)?,
            proj: Linear::new(&mut b.sub("sent_proj"), word_dim, sent_dim)?,
        })
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// `tokens` (…, L) u32 and `mask` (…, L). Every caption must contain at
    /// least one unpadded token.
    pub fn embed(&self, tokens: &Tensor, mask: &Tensor) -> Result<CaptionEmbedding> {
        let dims = tokens.dims().to_vec();
        let len = *dims
            .last()
            .ok_or_else(|| Error::shape("tokens must have a length axis"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let words = self.embedding.forward(tokens)?;
        let dt = words.dtype();
        let mask2 = mask.to_dtype(dt)?.reshape((rows, len))?;
        let counts = mask2
            .sum(1)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        if let Some(i) = counts.iter().position(|&c| c < 0.5) {
            return Err(Error::Precondition(format!(
                "caption row {i} has no unpadded tokens"
            )));
        }
        let wd = words.dim(D::Minus1)?;
        let words2 = words
            .reshape((rows, len, wd))?
            .broadcast_mul(&mask2.unsqueeze(2)?)?;
        let pooled = masked_mean(&words2, &mask2)?;
        let sentence = self.proj.forward(&pooled)?;
        let mut wshape = dims.clone();
        wshape.push(wd);
        let mut sshape = dims[..dims.len() - 1].to_vec();
        sshape.push(sentence.dim(1)?);
        Ok(CaptionEmbedding {
            words: words2.reshape(wshape)?,
            sentence: sentence.reshape(sshape)?,
        })
    }
}

/// Read a whitespace text file of `token v1 … vd` rows and copy matching
/// rows into the embedding table `param` of `store`. Returns how many vocab
/// entries were initialized.
pub fn apply_pretrained_vectors(
    store: &ParamStore,
    param: &str,
    vocab: &Vocab,
    path: &Path,
) -> Result<usize> {
    let var = store
        .get(param)
        .ok_or_else(|| Error::config(format!("no embedding parameter `{param}`")))?;
    let (v, dim) = var.as_tensor().dims2()?;
    let text = fs::read_to_string(path)?;
    let mut found: HashMap<u32, Vec<f64>> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let Some(id) = vocab.id(&tok.to_lowercase()) else {
            continue;
        };
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if vals.len() != dim {
            return Err(Error::config(format!(
                "{}:{}: vector has {} values, embedding width is {dim}",
                path.display(),
                n + 1,
                vals.len()
            )));
        }
        found.entry(id).or_insert(vals);
    }
    let mut table = crate::nn::to_f64_vec(var.as_tensor())?;
    for (&id, vals) in &found {
        table[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(vals);
    }
    let t = Tensor::from_vec(table, (v, dim), var.device())?;
    store.set(param, &t)?;
    Ok(found.len())
}

/// μ(S), σ²(S) from the concatenated sentence embeddings.
pub struct StoryEncoder {
    mu: Linear,
    log_var: Linear,
}

/// Sampled story conditioning: h0 = μ + (σ²)^{1/2} ⊙ ε.
#[derive(Clone, Debug)]
pub struct ConditioningState {
    pub mu: Tensor,
    /// σ², strictly positive.
    pub var: Tensor,
    pub h0: Tensor,
    pub eps: Tensor,
}

impl StoryEncoder {
    pub fn new(
        b: &mut Builder,
        story_len: usize,
        sent_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            mu: Linear::new(&mut b.sub("mu"), story_len * sent_dim, cond_dim)?,
            log_var: Linear::new(&mut b.sub("log_var"), story_len * sent_dim, cond_dim)?,
        })
    }

    /// Positivity of σ² comes from exponentiating a learned log-variance.
    pub fn posterior(&self, sentences: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = sentences.dims3()?;
        let s = sentences.reshape((b, t * d))?;
        let mu = self.mu.forward(&s)?;
        let var = self.log_var.forward(&s)?.exp()?;
        Ok((mu, var))
    }

    /// `sentences` (B, T, d_s), `eps` (B, d_h).
    pub fn encode(&self, sentences: &Tensor, eps: &Tensor) -> Result<ConditioningState> {
        let (mu, var) = self.posterior(sentences)?;
        Self::sample(mu, var, eps.clone())
    }

    pub fn sample(mu: Tensor, var: Tensor, eps: Tensor) -> Result<ConditioningState> {
        if mu.dims() != eps.dims() {
            return Err(Error::shape(format!(
                "noise shape {:?} does not match posterior {:?}",
                eps.dims(),
                mu.dims()
            )));
        }
        let h0 = (&mu + (var.sqrt()? * &eps)?)?;
        Ok(ConditioningState { mu, var, h0, eps })
    }
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1), averaged over
/// the batch axis of (B, d) inputs.
pub fn kl_divergence(mu: &Tensor, var: &Tensor) -> Result<Tensor> {
    let per = ((mu.sqr()? + var)? - var.log()?)?.affine(1.0, -1.0)?;
    Ok((per.sum(D::Minus1)? * 0.5)?.mean_all()?)
}

/// [`kl_divergence`] with the domain check on σ².
pub fn kl_loss(state: &ConditioningState) -> Result<Tensor> {
    let min = crate::nn::scalar(&state.var.min_all()?)?;
    if !(min > 0.0) {
        return Err(Error::Domain(format!(
            "σ² must be strictly positive (min {min})"
        )));
    }
    kl_divergence(&state.mu, &state.var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, ParamStore};
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn state(mu: &[f64], var: &[f64]) -> ConditioningState {
        let n = mu.len();
        StoryEncoder::sample(t(mu, &[1, n]), t(var, &[1, n]), t(&vec![0.0; n], &[1, n])).unwrap()
    }

    #[test]
    fn kl_closed_form_cases() {
        let z = kl_loss(&state(&[0.0; 4], &[1.0; 4])).unwrap();
        assert_eq!(crate::nn::scalar(&z).unwrap(), 0.0);
        let one = kl_loss(&state(&[1.0], &[1.0])).unwrap();
        assert!((crate::nn::scalar(&one).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_nonpositive_variance() {
        assert!(matches!(
            kl_loss(&state(&[0.0, 1.0], &[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            kl_loss(&state(&[0.0], &[-2.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampling_identities() {
        let mu = t(&[0.5, -1.0], &[1, 2]);
        let s = StoryEncoder::sample(mu.clone(), t(&[2.0, 3.0], &[1, 2]), t(&[0.0, 0.0], &[1, 2]))
            .unwrap();
        assert_eq!(to_f64_vec(&s.h0).unwrap(), vec![0.5, -1.0]);
        let s =
            StoryEncoder::sample(mu, t(&[1.0, 1.0], &[1, 2]), t(&[0.25, 2.0], &[1, 2])).unwrap();
        assert_eq!(to_f64_vec(&s.h0).unwrap(), vec![0.75, 1.0]);
    }

    #[test]
    fn single_token_sentence_is_projected_word() {
        let mut store = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&mut store.root(), 10, 4, 3).unwrap();
        let tokens = Tensor::new(&[[6u32, 0, 0]], &Device::Cpu).unwrap();
        let mask = t(&[1.0, 0.0, 0.0], &[1, 3]);
        let out = enc.embed(&tokens, &mask).unwrap();
        let word = out.words.narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
        let expect = enc.projection().forward(&word).unwrap();
        assert_eq!(
            to_f64_vec(&out.sentence).unwrap(),
            to_f64_vec(&expect).unwrap()
        );
        let pads = to_f64_vec(&out.words.narrow(1, 1, 2).unwrap()).unwrap();
        assert!(pads.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn all_pad_caption_is_rejected() {
        let mut store = ParamStore::new(DType::F32, 1);
        let enc = TextEncoder::new(&mut store.root(), 10, 4, 3).unwrap();
        let tokens = Tensor::new(&[[0u32, 0]], &Device::Cpu).unwrap();
        let mask = Tensor::zeros((1, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            enc.embed(&tokens, &mask),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let mut store = ParamStore::new(DType::F32, 1);
        TextEncoder::new(&mut store.root(), 6, 3, 2).unwrap();
        let vocab = Vocab::new(["cat", "dog"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        fs::write(&p, "dog 1 2 3\nfish 9 9 9\n").unwrap();
        let n = apply_pretrained_vectors(&store, "embedding.table", &vocab, &p).unwrap();
        assert_eq!(n, 1);
        let table = store
            .get("embedding.table")
            .unwrap()
            .as_tensor()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(
            table[vocab.id("dog").unwrap() as usize],
            vec![1.0, 2.0, 3.0]
        );
    }
}
