use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLoss {
    /// Softmax cross-entropy over exclusive classes.
    CrossEntropy,
    /// Independent sigmoid per class.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the objective changes by less than this between iterations.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 5000,
            tol: 1e-6,
        }
    }
}

/// Affine head on standardized features: `logits = W ((x - mean) / scale) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub loss: ProbeLoss,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    /// Class probabilities (softmax or per-class sigmoid).
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        match self.loss {
            ProbeLoss::CrossEntropy => softmax(&z),
            ProbeLoss::Binary => z.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// Folds standardization into raw-feature weights and bias.
    pub fn raw_affine(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let w: Vec<Vec<f64>> = self
            .weight
            .iter()
            .map(|row| row.iter().zip(&self.scale).map(|(a, s)| a / s).collect())
            .collect();
        let b = w
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b - row.iter().zip(&self.mean).map(|(a, m)| a * m).sum::<f64>())
            .collect();
        (w, b)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn log1pexp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [Vec<bool>],
    loss: ProbeLoss,
    l2: f64,
    c: usize,
    d: usize,
}

impl Problem<'_> {
    /// Parameters are packed as `C` rows of `d` weights followed by `C` biases.
    fn value_and_grad(&self, p: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let (c, d) = (self.c, self.d);
        let n = self.x.len() as f64;
        let mut grad = if want_grad { vec![0.0; c * d + c] } else { Vec::new() };
        let mut total = 0.0;
        let mut z = vec![0.0; c];
        for (xi, yi) in self.x.iter().zip(self.y) {
            for k in 0..c {
                let w = &p[k * d..(k + 1) * d];
                z[k] = w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + p[c * d + k];
            }
            let dz: Vec<f64> = match self.loss {
                ProbeLoss::CrossEntropy => {
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    let target = yi.iter().position(|&b| b).unwrap_or(0);
                    total += lse - z[target];
                    (0..c)
                        .map(|k| (z[k] - lse).exp() - if k == target { 1.0 } else { 0.0 })
                        .collect()
                }
                ProbeLoss::Binary => (0..c)
                    .map(|k| {
                        let t = if yi[k] { 1.0 } else { 0.0 };
                        total += log1pexp(z[k]) - t * z[k];
                        sigmoid(z[k]) - t
                    })
                    .collect(),
            };
            if want_grad {
                for k in 0..c {
                    let g = dz[k] / n;
                    for (gw, xv) in grad[k * d..(k + 1) * d].iter_mut().zip(xi) {
                        *gw += g * xv;
                    }
                    grad[c * d + k] += g;
                }
            }
        }
        let reg: f64 = p[..c * d].iter().map(|w| w * w).sum::<f64>() * self.l2 / 2.0;
        if want_grad {
            for (g, w) in grad[..c * d].iter_mut().zip(&p[..c * d]) {
                *g += self.l2 * w;
            }
        }
        (total / n + reg, grad)
    }
}

/// Full-batch gradient descent with Armijo backtracking on standardized
/// features. Deterministic; the result does not depend on row order beyond
/// floating-point summation order.
pub fn train_linear_head(features: &[Vec<f64>], targets: &[Vec<bool>], loss: ProbeLoss, cfg: &ProbeConfig) -> Result<LinearHead> {
    let n = features.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Argument(format!("{n} feature rows but {} label rows", targets.len())));
    }
    let d = features[0].len();
    let c = targets[0].len();
    if c < 2 || features.iter().any(|r| r.len() != d) || targets.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("inconsistent probe inputs".into()));
    }
    if loss == ProbeLoss::CrossEntropy && targets.iter().any(|r| r.iter().filter(|&&b| b).count() != 1) {
        return Err(Error::Validation("cross-entropy probe needs exactly one positive label per row".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let prob = Problem {
        x: &x,
        y: targets,
        loss,
        l2: cfg.l2,
        c,
        d,
    };
    let mut p = vec![0.0; c * d + c];
    let (mut f, mut g) = prob.value_and_grad(&p, true);
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 {
            converged = true;
            break;
        }
        step *= 2.0;
        let (p_new, f_new) = loop {
            let cand: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let (fc, _) = prob.value_and_grad(&cand, false);
            if fc <= f - 0.5 * step * gg || step < 1e-12 {
                break (cand, fc);
            }
            step *= 0.5;
        };
        let delta = f - f_new;
        p = p_new;
        let (fv, gv) = prob.value_and_grad(&p, true);
        f = fv;
        g = gv;
        if delta.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("linear probe stopped after {iterations} iterations without meeting tolerance");
    }
    let weight = (0..c).map(|k| p[k * d..(k + 1) * d].to_vec()).collect();
    let bias = p[c * d..].to_vec();
    Ok(LinearHead {
        weight,
        bias,
        mean,
        scale,
        loss,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(k: usize, c: usize) -> Vec<bool> {
        (0..c).map(|i| i == k).collect()
    }

    #[test]
    fn separable_one_hot_features_fit_exactly() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| one_hot(i % 3, 3).iter().map(|&b| b as u8 as f64).collect()).collect();
        let y: Vec<Vec<bool>> = (0..12).map(|i| one_hot(i % 3, 3)).collect();
        for loss in [ProbeLoss::CrossEntropy, ProbeLoss::Binary] {
            let head = train_linear_head(&x, &y, loss, &ProbeConfig::default()).unwrap();
            assert!(head.converged);
            for (xi, yi) in x.iter().zip(&y) {
                let p = head.predict_proba(xi);
                let arg = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                assert!(yi[arg]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = vec![vec![0.3, -1.2], vec![1.0, 0.5], vec![-0.7, 0.1]];
        let y = vec![one_hot(0, 3), one_hot(2, 3), one_hot(1, 3)];
        for loss in [ProbeLoss::CrossEntropy, ProbeLoss::Binary] {
            let prob = Problem {
                x: &x,
                y: &y,
                loss,
                l2: 0.1,
                c: 3,
                d: 2,
            };
            let p: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
            let (_, g) = prob.value_and_grad(&p, true);
            for i in 0..p.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let num = (prob.value_and_grad(&a, false).0 - prob.value_and_grad(&b, false).0) / 2e-6;
                assert!((num - g[i]).abs() < 1e-7, "{loss:?} {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn raw_affine_matches_standardized_logits() {
        let x = vec![vec![1.0, 5.0], vec![2.0, 3.0], vec![4.0, 4.5], vec![0.5, 1.0]];
        let y = vec![one_hot(0, 2), one_hot(1, 2), one_hot(1, 2), one_hot(0, 2)];
        let head = train_linear_head(&x, &y, ProbeLoss::CrossEntropy, &ProbeConfig::default()).unwrap();
        let (w, b) = head.raw_affine();
        for xi in &x {
            let direct = head.logits(xi);
            for k in 0..2 {
                let raw: f64 = w[k].iter().zip(xi).map(|(a, c)| a * c).sum::<f64>() + b[k];
                assert!((raw - direct[k]).abs() < 1e-9);
            }
        }
    }
}
