use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::{ParamEntry, ParamStore};
use crate::error::{Error, Result};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(
    store: &ParamStore,
    grads: &mut GradStore,
    trainable: impl Fn(&ParamEntry) -> bool,
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for e in store.entries().iter().filter(|e| trainable(e)) {
        if let Some(g) = grads.get(e.var.as_tensor()) {
            sq += super::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for e in store.entries().iter().filter(|e| trainable(e)) {
            if let Some(g) = grads.remove(e.var.as_tensor()) {
                grads.insert(e.var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Serializable optimizer state, aligned with the store's entry order.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub steps: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamWState,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Result<Self> {
        let zeros = store
            .entries()
            .iter()
            .map(|e| e.var.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: AdamWState {
                steps: vec![0; zeros.len()],
                m: zeros.clone(),
                v: zeros,
            },
        })
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamWState) -> Result<()> {
        let n = self.state.m.len();
        if state.m.len() != n || state.v.len() != n || state.steps.len() != n {
            return Err(Error::Validation("optimizer state does not match the model".into()));
        }
        for (old, new) in self.state.m.iter().zip(&state.m).chain(self.state.v.iter().zip(&state.v)) {
            if old.dims() != new.dims() {
                return Err(Error::Shape("optimizer moment shape mismatch".into()));
            }
        }
        self.state = state;
        Ok(())
    }

    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        trainable: impl Fn(&ParamEntry) -> bool,
    ) -> Result<()> {
        for (i, e) in store.entries().iter().enumerate() {
            if !trainable(e) {
                continue;
            }
            let Some(g) = grads.get(e.var.as_tensor()) else {
                continue;
            };
            self.state.steps[i] += 1;
            let t = self.state.steps[i] as i32;
            let m = ((&self.state.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.state.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / (1.0 - self.beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - self.beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let decay = if e.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let p = ((e.var.as_tensor() * decay)? - (update * lr)?)?;
            e.var.set(&p)?;
            self.state.m[i] = m;
            self.state.v[i] = v;
        }
        Ok(())
    }
}
