//! Memory-augmented recurrent transformer. Each step runs a small transformer
//! over the step's tokens where every layer also attends to that layer's
//! memory cells; the cells are then rewritten with a gated residual update
//! and carried into the next step.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::MartConfig;
use crate::error::{Error, Result};
use crate::nn::{
    masked_mean, sigmoid, to_f64_vec, Builder, Ctx, Init, LayerNorm, Linear, MultiHeadAttention,
};

/// Per-layer memory cells, each (B, cells, hidden).
#[derive(Clone, Debug)]
pub struct MemoryState {
    pub layers: Vec<Tensor>,
}

/// Plain-value form of a [`MemoryState`] for serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub batch: usize,
    pub cells: usize,
    pub hidden: usize,
    pub dtype: String,
    pub values: Vec<Vec<f64>>,
}

impl MemoryState {
    pub fn zeros(cfg: &MartConfig, batch: usize, dtype: DType) -> Result<Self> {
        let z = Tensor::zeros(
            (batch, cfg.num_memory_cells, cfg.hidden_size),
            dtype,
            &Device::Cpu,
        )?;
        Ok(Self {
            layers: vec![z; cfg.num_layers],
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|t| t.detach()).collect(),
        }
    }

    pub fn to_record(&self) -> Result<MemoryRecord> {
        let (batch, cells, hidden) = self.layers[0].dims3()?;
        Ok(MemoryRecord {
            batch,
            cells,
            hidden,
            dtype: format!("{:?}", self.layers[0].dtype()).to_lowercase(),
            values: self.layers.iter().map(to_f64_vec).collect::<Result<_>>()?,
        })
    }

    /// f32 values survive the f64 round trip exactly.
    pub fn from_record(rec: &MemoryRecord) -> Result<Self> {
        let dtype = match rec.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::config(format!("unsupported memory dtype `{other}`"))),
        };
        let layers = rec
            .values
            .iter()
            .map(|v| {
                if v.len() != rec.batch * rec.cells * rec.hidden {
                    return Err(Error::shape(
                        "memory record length does not match its header",
                    ));
                }
                Ok(
                    Tensor::from_vec(v.clone(), (rec.batch, rec.cells, rec.hidden), &Device::Cpu)?
                        .to_dtype(dtype)?,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

struct MartLayer {
    attn: MultiHeadAttention,
    ln_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_ff: LayerNorm,
    mem_cand: Linear,
    mem_gate: Linear,
}

/// Output of one recurrent step.
pub struct MartStep {
    /// (B, L, hidden) encodings of the step tokens.
    pub encodings: Tensor,
    pub memory: MemoryState,
    /// Per layer, the write gate g applied to the memory (B, cells, hidden).
    pub gates: Vec<Tensor>,
}

pub struct Mart {
    cfg: MartConfig,
    input_proj: Option<Linear>,
    positions: Tensor,
    layers: Vec<MartLayer>,
    init_proj: Option<Linear>,
    /// Forces every memory write gate to this constant when set.
    pub gate_override: Option<f64>,
}

impl Mart {
    /// `input_dim = None` means inputs already have `hidden_size` features.
    /// `cond_dim = None` builds a memory that always starts at zero.
    pub fn new(
        b: &mut Builder,
        cfg: &MartConfig,
        input_dim: Option<usize>,
        cond_dim: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_size;
        let input_proj = match input_dim {
            Some(d) => Some(Linear::new(&mut b.sub("input"), d, h)?),
            None => None,
        };
        let positions = b.param("positions", &[cfg.max_seq_len, h], Init::Normal(0.02))?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let mut lb = b.sub(&format!("layer{i}"));
            layers.push(MartLayer {
                attn: MultiHeadAttention::new(&mut lb.sub("attn"), h, cfg.num_heads)?,
                ln_attn: LayerNorm::new(&mut lb.sub("ln_attn"), h, cfg.layer_norm_eps)?,
                ff_in: Linear::new(&mut lb.sub("ff_in"), h, 4 * h)?,
                ff_out: Linear::new(&mut lb.sub("ff_out"), 4 * h, h)?,
                ln_ff: LayerNorm::new(&mut lb.sub("ln_ff"), h, cfg.layer_norm_eps)?,
                mem_cand: Linear::new(&mut lb.sub("mem_cand"), 2 * h, h)?,
                mem_gate: Linear::new(&mut lb.sub("mem_gate"), 2 * h, h)?,
            });
        }
        let init_proj = match cond_dim {
            Some(d) => {
                let out = cfg.num_layers * cfg.num_memory_cells * h;
                let mut ib = b.sub("init_memory");
                Some(Linear::with_init(
                    &mut ib,
                    d,
                    out,
                    Init::FanIn(d),
                    Init::Zeros,
                )?)
            }
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            positions,
            layers,
            init_proj,
            gate_override: None,
        })
    }

    pub fn config(&self) -> &MartConfig {
        &self.cfg
    }

    pub fn init_projection(&self) -> Option<&Linear> {
        self.init_proj.as_ref()
    }

    /// Every cell of every layer is a learned linear image of `h0` (B, d_h).
    /// Without an init projection the memory starts at zero.
    pub fn init_memory(&self, h0: &Tensor) -> Result<MemoryState> {
        let bsz = h0.dim(0)?;
        let Some(proj) = &self.init_proj else {
            return MemoryState::zeros(&self.cfg, bsz, h0.dtype());
        };
        let (m, h) = (self.cfg.num_memory_cells, self.cfg.hidden_size);
        let all = proj
            .forward(h0)?
            .reshape((bsz, self.cfg.num_layers, m, h))?;
        let layers = (0..self.cfg.num_layers)
            .map(|l| Ok(all.narrow(1, l, 1)?.squeeze(1)?))
            .collect::<Result<_>>()?;
        Ok(MemoryState { layers })
    }

    /// `inputs` (B, L, d_in), `mask` (B, L) with 1 for real tokens.
    pub fn step(
        &self,
        inputs: &Tensor,
        mask: &Tensor,
        mem: &MemoryState,
        ctx: &mut Ctx,
    ) -> Result<MartStep> {
        let x = match &self.input_proj {
            Some(p) => p.forward(inputs)?,
            None => inputs.clone(),
        };
        self.step_embedded(&x, mask, None, mem, ctx)
    }

    /// Same as [`Mart::step`] for inputs already at the hidden width.
    /// `token_allow` (B or 1, L, L) further restricts token-to-token
    /// attention, e.g. causal text decoding.
    pub fn step_embedded(
        &self,
        x: &Tensor,
        mask: &Tensor,
        token_allow: Option<&Tensor>,
        mem: &MemoryState,
        ctx: &mut Ctx,
    ) -> Result<MartStep> {
        let (bsz, len, h) = x.dims3()?;
        if h != self.cfg.hidden_size {
            return Err(Error::shape(format!(
                "MART input width {h}, hidden size {}",
                self.cfg.hidden_size
            )));
        }
        if len > self.cfg.max_seq_len {
            return Err(Error::shape(format!(
                "step length {len} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        if mem.layers.len() != self.layers.len() {
            return Err(Error::shape("memory layer count does not match the model"));
        }
        let dt = x.dtype();
        let mask = mask.to_dtype(dt)?;
        let counts = to_f64_vec(&mask.sum(1)?)?;
        if let Some(i) = counts.iter().position(|&c| c < 0.5) {
            return Err(Error::Precondition(format!(
                "MART step: row {i} has an all-false mask"
            )));
        }
        let cells = self.cfg.num_memory_cells;
        let pos = self.positions.narrow(0, 0, len)?.unsqueeze(0)?;
        let mut x = x.broadcast_add(&pos)?;

        // (B, 1, L, cells + L): memory always visible, tokens by mask.
        let mem_cols = Tensor::ones((bsz, 1, len, cells), dt, x.device())?;
        let mut tok_cols = mask
            .reshape((bsz, 1, 1, len))?
            .broadcast_as((bsz, 1, len, len))?;
        if let Some(a) = token_allow {
            let a = a.to_dtype(dt)?;
            let a = a.reshape((a.dim(0)?, 1, len, len))?;
            tok_cols = tok_cols.broadcast_mul(&a)?;
        }
        let allow = Tensor::cat(&[mem_cols, tok_cols.contiguous()?], 3)?;

        let mut new_layers = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(self.layers.len());
        for (layer, m) in self.layers.iter().zip(&mem.layers) {
            let kv = Tensor::cat(&[m, &x], 1)?;
            let (att, _) = layer.attn.forward(&x, &kv, &allow)?;
            let att = ctx.dropout(&att, self.cfg.dropout)?;
            let y = layer.ln_attn.forward(&(&x + att)?)?;
            let ff = layer.ff_out.forward(&layer.ff_in.forward(&y)?.gelu()?)?;
            let ff = ctx.dropout(&ff, self.cfg.dropout)?;
            x = layer.ln_ff.forward(&(&y + ff)?)?;

            let summary = masked_mean(&x, &mask)?
                .unsqueeze(1)?
                .broadcast_as((bsz, cells, h))?;
            let joint = Tensor::cat(&[m, &summary.contiguous()?], 2)?;
            let cand = layer.mem_cand.forward(&joint)?.tanh()?;
            let g = match self.gate_override {
                Some(v) => Tensor::full(v, (bsz, cells, h), x.device())?.to_dtype(dt)?,
                None => sigmoid(&layer.mem_gate.forward(&joint)?)?,
            };
            let keep = g.affine(-1.0, 1.0)?;
            new_layers.push(((&g * cand)? + (keep * m)?)?);
            gates.push(g);
        }
        Ok(MartStep {
            encodings: x,
            memory: MemoryState { layers: new_layers },
            gates,
        })
    }
}
