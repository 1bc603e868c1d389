//! Contrastive and captioning losses and their weighted sum.
//!
//! Both losses upcast to `f64` before the log-sum-exp reductions and return
//! a scalar tensor in `f64` that stays connected to the inputs' graph.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, scalar};

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_cap: f64,
    /// Initial temperature; trained as its logarithm.
    pub init_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 1.0,
            lambda_cap: 1.0,
            init_sigma: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_con", self.lambda_con), ("lambda_cap", self.lambda_cap)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_con == 0.0 && self.lambda_cap == 0.0 {
            return Err(Error::Validation("at least one loss weight must be positive".into()));
        }
        if !(SIGMA_MIN..=SIGMA_MAX).contains(&self.init_sigma) {
            return Err(Error::Validation(format!(
                "init_sigma must lie in [{SIGMA_MIN}, {SIGMA_MAX}], got {}",
                self.init_sigma
            )));
        }
        Ok(())
    }
}

pub fn clamp_log_sigma(log_sigma: &Tensor) -> Result<Tensor> {
    Ok(log_sigma.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())?)
}

fn check_unit_rows(x: &Tensor, name: &str) -> Result<()> {
    let norms = x.to_dtype(DType::F64)?.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f64>()?;
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::Numeric(format!("non-finite values in {name}")));
    }
    if let Some(n) = norms.iter().find(|n| (*n - 1.0).abs() > 1e-4) {
        return Err(Error::Validation(format!("{name} rows must be unit-norm, found norm {n}")));
    }
    Ok(())
}

fn diagonal_mean(lp: &Tensor) -> Result<Tensor> {
    let n = lp.dim(0)?;
    let eye = Tensor::eye(n, DType::F64, lp.device())?;
    Ok(((lp * eye)?.sum_all()? / n as f64)?)
}

/// Symmetric InfoNCE over matched rows of `s` and `t` (`[N, d]`, unit-norm)
/// at temperature `exp(log_sigma)`; `log_sigma` is a one-element tensor.
pub fn contrastive_loss(s: &Tensor, t: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let (n, d) = s.dims2()?;
    if n == 0 || t.dims() != [n, d] {
        return Err(Error::Shape(format!("S is {:?}, T is {:?}", s.dims(), t.dims())));
    }
    check_unit_rows(s, "S")?;
    check_unit_rows(t, "T")?;
    let log_sigma = log_sigma.to_dtype(DType::F64)?.flatten_all()?;
    if !scalar(&log_sigma.sum_all()?)?.is_finite() {
        return Err(Error::Numeric("non-finite temperature".into()));
    }
    let inv_sigma = log_sigma.neg()?.exp()?;
    let sim = s.to_dtype(DType::F64)?.matmul(&t.to_dtype(DType::F64)?.t()?)?;
    let logits = sim.broadcast_mul(&inv_sigma)?;
    let ecg_to_text = diagonal_mean(&log_softmax_last(&logits)?)?;
    let text_to_ecg = diagonal_mean(&log_softmax_last(&logits.t()?.contiguous()?)?)?;
    Ok((ecg_to_text + text_to_ecg)?.neg()?)
}

/// Convenience form with a fixed temperature.
pub fn contrastive_loss_at(s: &Tensor, t: &Tensor, sigma: f64) -> Result<Tensor> {
    let ls = Tensor::new(&[sigma.ln()], s.device())?;
    contrastive_loss(s, t, &ls)
}

/// Mean negative log-likelihood of `targets` under `logits` (`[B, L, V]`)
/// over positions where `valid` is true.
pub fn captioning_loss(logits: &Tensor, targets: &[Vec<u32>], valid: &[Vec<bool>]) -> Result<Tensor> {
    let (b, l, v) = logits.dims3()?;
    if targets.len() != b || valid.len() != b {
        return Err(Error::Shape(format!("logits batch {b}, targets {}, mask {}", targets.len(), valid.len())));
    }
    let mut idx = Vec::with_capacity(b * l);
    let mut weight = Vec::with_capacity(b * l);
    for (row, m) in targets.iter().zip(valid) {
        if row.len() != l || m.len() != l {
            return Err(Error::Shape(format!("target rows must have length {l}")));
        }
        for (&id, &ok) in row.iter().zip(m) {
            if id as usize >= v {
                return Err(Error::Range { id, vocab_size: v });
            }
            idx.push(id);
            weight.push(if ok { 1.0f64 } else { 0.0 });
        }
    }
    let count: f64 = weight.iter().sum();
    if count == 0.0 {
        return Err(Error::UndefinedLoss("every target position is padding".into()));
    }
    let device = logits.device();
    let lp = log_softmax_last(&logits.to_dtype(DType::F64)?)?;
    let picked = lp.gather(&Tensor::from_vec(idx, (b, l, 1), device)?, 2)?.squeeze(2)?;
    let w = Tensor::from_vec(weight, (b, l), device)?;
    Ok(((picked * w)?.sum_all()? / -count)?)
}

/// `lambda_con * l_con + lambda_cap * l_cap`.
pub fn total_loss(l_con: &Tensor, l_cap: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok(((l_con * weights.lambda_con)? + (l_cap * weights.lambda_cap)?)?)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::nn::init_rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = init_rng(seed);
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.extend(row.iter().map(|x| x / norm));
        }
        Tensor::from_vec(v, (n, d), &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let s = unit_rows(1, 5, 0);
        assert_eq!(value(&contrastive_loss_at(&s, &s, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn identity_pair_value() {
        let s = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((value(&contrastive_loss_at(&s, &s, 1.0).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_and_non_unit_rejected() {
        let bad = Tensor::new(&[[f64::NAN, 0.0]], &Device::Cpu).unwrap();
        let good = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        assert!(matches!(contrastive_loss_at(&bad, &good, 1.0), Err(Error::Numeric(_))));
        let long = Tensor::new(&[[2.0f64, 0.0]], &Device::Cpu).unwrap();
        assert!(contrastive_loss_at(&long, &good, 1.0).is_err());
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::zeros((2, 3, 16), DType::F32, &Device::Cpu).unwrap();
        let t = vec![vec![1, 2, 3], vec![4, 0, 0]];
        let m = vec![vec![true; 3], vec![true, false, false]];
        assert!((value(&captioning_loss(&logits, &t, &m).unwrap()) - 16f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn peaked_logits_give_near_zero() {
        let t = vec![vec![1u32, 2, 3]];
        let mut v = vec![0f32; 3 * 8];
        for (i, &id) in t[0].iter().enumerate() {
            v[i * 8 + id as usize] = 1e4;
        }
        let logits = Tensor::from_vec(v, (1, 3, 8), &Device::Cpu).unwrap();
        assert!(value(&captioning_loss(&logits, &t, &[vec![true; 3]]).unwrap()) < 1e-4);
    }

    #[test]
    fn all_pad_is_undefined() {
        let logits = Tensor::zeros((1, 2, 4), DType::F32, &Device::Cpu).unwrap();
        let r = captioning_loss(&logits, &[vec![0, 0]], &[vec![false, false]]);
        assert!(matches!(r, Err(Error::UndefinedLoss(_))));
    }

    #[test]
    fn weighted_sum_is_exact() {
        let a = Tensor::new(0.7f64, &Device::Cpu).unwrap();
        let b = Tensor::new(1.3f64, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        assert_eq!(value(&total_loss(&a, &b, &w).unwrap()), 0.7 + 1.3);
        let w = LossWeights { lambda_cap: 0.0, ..w };
        assert_eq!(value(&total_loss(&a, &b, &w).unwrap()), 0.7);
    }

    #[test]
    fn direct_optimization_decreases_monotonically() {
        let n = 8;
        let d = 16;
        let s0 = unit_rows(n, d, 1).to_vec2::<f64>().unwrap();
        let t0 = unit_rows(n, d, 2).to_vec2::<f64>().unwrap();
        let s = candle_core::Var::new(s0, &Device::Cpu).unwrap();
        let t = candle_core::Var::new(t0, &Device::Cpu).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let sn = crate::nn::l2_normalize(s.as_tensor()).unwrap();
            let tn = crate::nn::l2_normalize(t.as_tensor()).unwrap();
            let loss = contrastive_loss_at(&sn, &tn, 0.5).unwrap();
            let l = value(&loss);
            assert!(l < prev, "{l} >= {prev}");
            prev = l;
            let g = loss.backward().unwrap();
            for v in [&s, &t] {
                let step = (g.get(v.as_tensor()).unwrap() * 0.5).unwrap();
                v.set(&(v.as_tensor() - step).unwrap()).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_permutation_invariant(n in 1usize..8, d in 2usize..8, seed in 0u64..1000, sigma in 0.05f64..2.0) {
            let s = unit_rows(n, d, seed);
            let t = unit_rows(n, d, seed + 1);
            let base = value(&contrastive_loss_at(&s, &t, sigma).unwrap());
            prop_assert!(base >= 0.0);
            let swapped = value(&contrastive_loss_at(&t, &s, sigma).unwrap());
            prop_assert!((base - swapped).abs() < 1e-9);
            let perm: Vec<u32> = (0..n as u32).rev().collect();
            let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
            let ps = s.index_select(&idx, 0).unwrap();
            let pt = t.index_select(&idx, 0).unwrap();
            prop_assert!((base - value(&contrastive_loss_at(&ps, &pt, sigma).unwrap())).abs() < 1e-6);
        }

        #[test]
        fn temperature_preserves_row_ranking(n in 2usize..8, seed in 0u64..1000, a in 0.05f64..1.0, b in 1.0f64..5.0) {
            let s = unit_rows(n, 4, seed);
            let t = unit_rows(n, 4, seed + 7);
            let sim = s.matmul(&t.t().unwrap()).unwrap();
            let ra = (&sim / a).unwrap().argmax(D::Minus1).unwrap().to_vec1::<u32>().unwrap();
            let rb = (&sim / b).unwrap().argmax(D::Minus1).unwrap().to_vec1::<u32>().unwrap();
            prop_assert_eq!(ra, rb);
            let la = value(&contrastive_loss_at(&s, &t, a).unwrap());
            let lb = value(&contrastive_loss_at(&s, &t, b).unwrap());
            prop_assert!(la.is_finite() && lb.is_finite());
        }
    }
}
