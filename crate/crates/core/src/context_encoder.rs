//! Per-frame conditioning: MART word encodings m_k, attention-pooled c_k,
//! GRU output g_k and the Text2Gist vector o_k.

use candle_core::{Tensor, D};

use crate::config::{ContextVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::mart::{Mart, MemoryState};
use crate::nn::{masked_softmax, Builder, Ctx, GruCell, Init, Linear};

#[derive(Clone, Debug)]
pub struct FrameContext {
    /// (B, L, hidden) contextual word encodings, zero at padded positions.
    pub m: Tensor,
    /// (B, L) pooling weights over words.
    pub alpha: Tensor,
    /// (B, hidden)
    pub c: Tensor,
    /// (B, d_g) GRU output; equal to `q` for a single-layer GRU.
    pub g: Tensor,
    pub q: Tensor,
    /// (B, C_out)
    pub o: Tensor,
    /// (B, d_s) noise fed to the GRU.
    pub eps: Tensor,
}

/// α = softmax over unmasked positions of m·u; returns (Σ α m, α).
pub fn attention_pool(enc: &Tensor, mask: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)> {
    let logits = enc
        .broadcast_matmul(&u.reshape(((), 1))?)?
        .squeeze(D::Minus1)?;
    let alpha = masked_softmax(&logits, &mask.to_dtype(enc.dtype())?)?;
    let pooled = alpha.unsqueeze(1)?.matmul(enc)?.squeeze(1)?;
    Ok((pooled, alpha))
}

/// o[c] = Σ_j F[c, j] · signal[j] for `filter` (B, C_out, d_p), `signal` (B, d_p).
pub fn apply_gist_filter(filter: &Tensor, signal: &Tensor) -> Result<Tensor> {
    Ok(filter
        .matmul(&signal.unsqueeze(D::Minus1)?)?
        .squeeze(D::Minus1)?)
}

pub struct ContextEncoder {
    pub mart: Mart,
    pool_query: Tensor,
    gru: GruCell,
    sent_proj: Linear,
    filter: Linear,
    gist_channels: usize,
    gist_proj: usize,
    variant: ContextVariant,
}

impl ContextEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.mart.hidden_size;
        let cond = match cfg.context_variant {
            ContextVariant::Mart => Some(cfg.cond_dim),
            ContextVariant::Transformer => None,
        };
        Ok(Self {
            mart: Mart::new(&mut b.sub("mart"), &cfg.mart, Some(cfg.word_dim), cond)?,
            pool_query: b.param("pool_query", &[h], Init::Normal(1.0 / (h as f64).sqrt()))?,
            gru: GruCell::new(&mut b.sub("gru"), 2 * cfg.sent_dim, cfg.gru_dim)?,
            sent_proj: Linear::new(&mut b.sub("gist_signal"), cfg.sent_dim, cfg.gist_proj_dim)?,
            filter: Linear::new(
                &mut b.sub("gist_filter"),
                h + cfg.gru_dim,
                cfg.gist_channels * cfg.gist_proj_dim,
            )?,
            gist_channels: cfg.gist_channels,
            gist_proj: cfg.gist_proj_dim,
            variant: cfg.context_variant,
        })
    }

    pub fn pool_query(&self) -> &Tensor {
        &self.pool_query
    }

    pub fn gru(&self) -> &GruCell {
        &self.gru
    }

    /// Standard GRU over [s_k; ε_k]; returns (g_k, q_k).
    pub fn gru_step(&self, s: &Tensor, eps: &Tensor, q_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.gru.forward(&Tensor::cat(&[s, eps], 1)?, q_prev)?;
        Ok((q.clone(), q))
    }

    /// Generated filter F = Filter([c; g]) as (B, C_out, d_p).
    pub fn gist_filter(&self, c: &Tensor, g: &Tensor) -> Result<Tensor> {
        let bsz = c.dim(0)?;
        Ok(self.filter.forward(&Tensor::cat(&[c, g], 1)?)?.reshape((
            bsz,
            self.gist_channels,
            self.gist_proj,
        ))?)
    }

    pub fn text2gist(&self, c: &Tensor, g: &Tensor, s: &Tensor) -> Result<Tensor> {
        let signal = self.sent_proj.forward(s)?.tanh()?;
        apply_gist_filter(&self.gist_filter(c, g)?, &signal)
    }

    pub fn initial_memory(&self, h0: &Tensor) -> Result<MemoryState> {
        match self.variant {
            ContextVariant::Mart => self.mart.init_memory(h0),
            ContextVariant::Transformer => {
                MemoryState::zeros(self.mart.config(), h0.dim(0)?, h0.dtype())
            }
        }
    }

    /// One frame given the memory and GRU state from the previous frame.
    #[allow(clippy::too_many_arguments)]
    pub fn frame(
        &self,
        words: &Tensor,
        mask: &Tensor,
        sentence: &Tensor,
        eps: &Tensor,
        mem: &MemoryState,
        q_prev: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<(FrameContext, MemoryState)> {
        let step = self.mart.step(words, mask, mem, ctx)?;
        let mask_f = mask.to_dtype(words.dtype())?;
        let m = step.encodings.broadcast_mul(&mask_f.unsqueeze(2)?)?;
        let (c, alpha) = attention_pool(&m, &mask_f, &self.pool_query)?;
        let (g, q) = self.gru_step(sentence, eps, q_prev)?;
        let o = self.text2gist(&c, &g, sentence)?;
        Ok((
            FrameContext {
                m,
                alpha,
                c,
                g,
                q,
                o,
                eps: eps.clone(),
            },
            step.memory,
        ))
    }

    /// `words` (B, T, L, d_w), `mask` (B, T, L), `sentences` (B, T, d_s),
    /// `h0` (B, d_h), `eps` (B, T, d_s). Memory and GRU state thread through
    /// the frames in order.
    pub fn encode(
        &self,
        words: &Tensor,
        mask: &Tensor,
        sentences: &Tensor,
        h0: &Tensor,
        eps: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Vec<FrameContext>> {
        let (bsz, t, _, _) = words.dims4()?;
        if eps.dims() != sentences.dims() {
            return Err(Error::shape(format!(
                "GRU noise {:?} must match sentences {:?}",
                eps.dims(),
                sentences.dims()
            )));
        }
        let mut mem = self.initial_memory(h0)?;
        let mut q = Tensor::zeros((bsz, self.gru.hidden()), words.dtype(), words.device())?;
        let mut out = Vec::with_capacity(t);
        for k in 0..t {
            let pick = |x: &Tensor| -> Result<Tensor> { Ok(x.narrow(1, k, 1)?.squeeze(1)?) };
            let (fc, next) = self.frame(
                &pick(words)?,
                &pick(mask)?,
                &pick(sentences)?,
                &pick(eps)?,
                &mem,
                &q,
                ctx,
            )?;
            q = fc.q.clone();
            mem = next;
            out.push(fc);
        }
        Ok(out)
    }
}
