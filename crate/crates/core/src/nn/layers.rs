use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{Builder, Init};
use crate::error::{Error, Result};

/// Additive bias used to exclude positions from a softmax. `exp` of it
/// underflows to exactly zero in both f32 and f64.
pub const MASK_BIAS: f64 = -1e9;

/// Forward-pass context: train/eval switch plus the seeded stream used for
/// dropout masks.
pub struct Ctx<'r> {
    train: bool,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'static> {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: None,
        }
    }
}

impl<'r> Ctx<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Ctx {
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let rng = match self.rng.as_deref_mut() {
            Some(r) => r,
            None => return Ok(x.clone()),
        };
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Numerically stable logistic function, 0.5·(tanh(x/2)+1).
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Softmax over the last dimension; the max shift is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax over the last dimension restricted to positions where `mask`
/// (broadcastable, 1 = keep, 0 = drop) is set. Dropped positions receive
/// exactly zero weight.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(logits.dtype())?;
    // 0 where kept, MASK_BIAS where dropped
    let bias = mask.affine(-MASK_BIAS, MASK_BIAS)?;
    let p = softmax_last(&logits.broadcast_add(&bias)?)?;
    Ok(p.broadcast_mul(&mask)?)
}

/// Mean over dim 1 of `x` (B, L, H) counting only positions with mask 1.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(x.dtype())?.unsqueeze(D::Minus1)?;
    let num = x.broadcast_mul(&mask)?.sum(1)?;
    let den = mask.sum(1)?.clamp(1.0, f64::INFINITY)?;
    Ok(num.broadcast_div(&den)?)
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.param("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        let bias = Some(b.param("bias", &[out_dim], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.param("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        Ok(Self { weight, bias: None })
    }

    pub fn with_init(
        b: &mut Builder,
        in_dim: usize,
        out_dim: usize,
        w: Init,
        bias: Init,
    ) -> Result<Self> {
        let weight = b.param("weight", &[out_dim, in_dim], w)?;
        let bias = Some(b.param("bias", &[out_dim], bias)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims
            .last()
            .ok_or_else(|| Error::shape("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = x2.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out)?)
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = b.param(
            "weight",
            &[out_c, in_c, kernel, kernel],
            Init::FanIn(fan_in),
        )?;
        let bias = b.param("bias", &[out_c], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Ones)?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(b: &mut Builder, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.param("table", &[vocab, dim], Init::Normal(0.3))?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `ids` is a u32 tensor of any shape; output appends the embedding dim.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let v = self.vocab_size();
        let flat = ids.flatten_all()?;
        if let Some(&bad) = flat.to_vec1::<u32>()?.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Lookup {
                id: bad,
                vocab_size: v,
            });
        }
        let rows = self.table.index_select(&flat, 0)?;
        let mut shape = ids.dims().to_vec();
        shape.push(self.table.dims()[1]);
        Ok(rows.reshape(shape)?)
    }
}

/// GRU cell with gates ordered (reset, update, candidate) and the update rule
/// `h' = (1 - z)·h + z·n`, so a closed update gate keeps the state.
pub struct GruCell {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

pub struct GruGates {
    pub reset: Tensor,
    pub update: Tensor,
    pub candidate: Tensor,
}

impl GruCell {
    pub fn new(b: &mut Builder, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: b.param("w_ih", &[3 * hidden, input], Init::FanIn(hidden))?,
            w_hh: b.param("w_hh", &[3 * hidden, hidden], Init::FanIn(hidden))?,
            b_ih: b.param("b_ih", &[3 * hidden], Init::FanIn(hidden))?,
            b_hh: b.param("b_hh", &[3 * hidden], Init::FanIn(hidden))?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn gates(&self, x: &Tensor, h: &Tensor) -> Result<GruGates> {
        let gi = x.matmul(&self.w_ih.t()?)?.broadcast_add(&self.b_ih)?;
        let gh = h.matmul(&self.w_hh.t()?)?.broadcast_add(&self.b_hh)?;
        let hsz = self.hidden;
        let reset = sigmoid(&(gi.narrow(1, 0, hsz)? + gh.narrow(1, 0, hsz)?)?)?;
        let update = sigmoid(&(gi.narrow(1, hsz, hsz)? + gh.narrow(1, hsz, hsz)?)?)?;
        let candidate =
            (gi.narrow(1, 2 * hsz, hsz)? + (&reset * gh.narrow(1, 2 * hsz, hsz)?)?)?.tanh()?;
        Ok(GruGates {
            reset,
            update,
            candidate,
        })
    }

    pub fn combine(h: &Tensor, update: &Tensor, candidate: &Tensor) -> Result<Tensor> {
        let keep = update.affine(-1.0, 1.0)?;
        Ok(((keep * h)? + (update * candidate)?)?)
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let g = self.gates(x, h)?;
        Self::combine(h, &g.update, &g.candidate)
    }
}

pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(b: &mut Builder, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: b.param("w_ih", &[4 * hidden, input], Init::FanIn(hidden))?,
            w_hh: b.param("w_hh", &[4 * hidden, hidden], Init::FanIn(hidden))?,
            bias: b.param("bias", &[4 * hidden], Init::Zeros)?,
            hidden,
        })
    }

    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let g =
            (x.matmul(&self.w_ih.t()?)? + h.matmul(&self.w_hh.t()?)?)?.broadcast_add(&self.bias)?;
        let n = self.hidden;
        let i = sigmoid(&g.narrow(1, 0, n)?)?;
        let f = sigmoid(&g.narrow(1, n, n)?)?;
        let cand = g.narrow(1, 2 * n, n)?.tanh()?;
        let o = sigmoid(&g.narrow(1, 3 * n, n)?)?;
        let c2 = ((f * c)? + (i * cand)?)?;
        let h2 = (o * c2.tanh()?)?;
        Ok((h2, c2))
    }
}

/// Bidirectional LSTM over (B, L, in) with a (B, L) validity mask. Padded
/// steps carry the state through unchanged, so trailing padding is inert in
/// both directions.
pub struct BiLstm {
    fwd: LstmCell,
    bwd: LstmCell,
    hidden: usize,
}

pub struct BiLstmOutput {
    /// (B, L, 2·hidden), zero at padded positions.
    pub states: Tensor,
    /// (B, 2·hidden): final forward state and final backward state.
    pub summary: Tensor,
}

impl BiLstm {
    pub fn new(b: &mut Builder, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(&mut b.sub("fwd"), input, hidden)?,
            bwd: LstmCell::new(&mut b.sub("bwd"), input, hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<BiLstmOutput> {
        let (bsz, len, _) = x.dims3()?;
        let mask = mask.to_dtype(x.dtype())?;
        let zeros = Tensor::zeros((bsz, self.hidden), x.dtype(), x.device())?;
        let run = |cell: &LstmCell, order: Vec<usize>| -> Result<(Vec<Tensor>, Tensor)> {
            let (mut h, mut c) = (zeros.clone(), zeros.clone());
            let mut outs = vec![zeros.clone(); len];
            for t in order {
                let xt = x.narrow(1, t, 1)?.squeeze(1)?;
                let m = mask.narrow(1, t, 1)?;
                let (h2, c2) = cell.step(&xt, &h, &c)?;
                let keep = m.affine(-1.0, 1.0)?;
                h = (h2.broadcast_mul(&m)? + h.broadcast_mul(&keep)?)?;
                c = (c2.broadcast_mul(&m)? + c.broadcast_mul(&keep)?)?;
                outs[t] = h.broadcast_mul(&m)?;
            }
            Ok((outs, h))
        };
        let (f_outs, f_last) = run(&self.fwd, (0..len).collect())?;
        let (b_outs, b_last) = run(&self.bwd, (0..len).rev().collect())?;
        let f = Tensor::stack(&f_outs, 1)?;
        let bk = Tensor::stack(&b_outs, 1)?;
        Ok(BiLstmOutput {
            states: Tensor::cat(&[f, bk], 2)?,
            summary: Tensor::cat(&[f_last, b_last], 1)?,
        })
    }
}

/// Multi-head scaled dot-product attention.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::config(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.sub("q"), hidden, hidden)?,
            k: Linear::new(&mut b.sub("k"), hidden, hidden)?,
            v: Linear::new(&mut b.sub("v"), hidden, hidden)?,
            o: Linear::new(&mut b.sub("o"), hidden, hidden)?,
            heads,
        })
    }

    /// `query` (B, Lq, H), `kv` (B, Lk, H), `allow` broadcastable to
    /// (B, 1, Lq, Lk) with 1 where attention is permitted. Returns the output
    /// and the attention weights (B, heads, Lq, Lk).
    pub fn forward(&self, query: &Tensor, kv: &Tensor, allow: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bsz, lq, hidden) = query.dims3()?;
        let lk = kv.dim(1)?;
        let dh = hidden / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((bsz, len, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(query)?, lq)?;
        let k = split(self.k.forward(kv)?, lk)?;
        let v = split(self.v.forward(kv)?, lk)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = masked_softmax(&scores, allow)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bsz, lq, hidden))?;
        Ok((self.o.forward(&ctx)?, weights))
    }
}

/// Standard-normal tensor drawn from a seeded stream.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_normalizes() {
        let logits = t(&[1.0, 2.0, 50.0, -3.0], &[1, 4]);
        let mask = t(&[1.0, 1.0, 0.0, 1.0], &[1, 4]);
        let p = to_f64_vec(&masked_softmax(&logits, &mask).unwrap()).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = t(&[-1e4, 0.0, 1e4], &[3]);
        let s = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let x = t(&[3.0, -1.0, 0.5, 10.0, 10.0, 10.0], &[2, 3]);
        let lp = log_softmax_last(&x).unwrap();
        let lse = lp.exp().unwrap().sum(1).unwrap();
        for v in to_f64_vec(&lse).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut store = ParamStore::new(DType::F32, 0);
        let e = Embedding::new(&mut store.root(), 5, 3).unwrap();
        let ids = Tensor::new(&[1u32, 7], &Device::Cpu).unwrap();
        assert!(matches!(e.forward(&ids), Err(Error::Lookup { id: 7, .. })));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        let y = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![1.0, 2.0, 3.0]);
    }
}
