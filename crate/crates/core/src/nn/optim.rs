use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction and no weight decay. The learning rate is
/// mutable so the epoch schedule can drive it.
pub struct Adam {
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub steps: u64,
    pub lr: f64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64)) -> Result<Self> {
        let vars = store.trainable()?;
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let first = vars
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<_>>()?;
        let second = vars
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            vars,
            first,
            second,
            steps: 0,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Squared L2 norm of the gradients this optimizer would apply.
    pub fn grad_norm_sq(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += super::layers::scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their own op graph; keep it out of the moments.
            let g = &g.detach();
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            steps: self.steps,
            lr: self.lr,
            moments: self
                .vars
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.clone(), (self.first[i].clone(), self.second[i].clone())))
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &AdamState) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (m, v) = state.moments.get(name).ok_or_else(|| {
                Error::Snapshot(format!("optimizer state lacks moments for `{name}`"))
            })?;
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Snapshot(format!(
                    "optimizer moment shape mismatch for `{name}`"
                )));
            }
            self.first[i] = m.to_dtype(var.dtype())?;
            self.second[i] = v.to_dtype(var.dtype())?;
        }
        self.steps = state.steps;
        self.lr = state.lr;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.root().param("w", &[2], Init::Ones).unwrap();
        let mut opt = Adam::new(&store, 0.1, (0.5, 0.999)).unwrap();
        let loss = (&w * &Tensor::new(&[3.0f64, -2.0], w.device()).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let after = store
            .get("w")
            .unwrap()
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6);
        assert!((after[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_store_has_no_optimizer() {
        let mut store = ParamStore::new(DType::F32, 0);
        store.root().param("w", &[2], Init::Ones).unwrap();
        store.freeze();
        assert!(Adam::new(&store, 0.1, (0.5, 0.999)).is_err());
    }
}
