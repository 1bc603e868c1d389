use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Mann-Whitney AUC with ties counted one half. `None` when either class
/// is absent.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Average ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
}

/// One-vs-rest AUC per class, macro-averaged over classes where it is defined.
pub fn metric_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> AucReport {
    let n_classes = labels.first().map_or(0, Vec::len);
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            let auc = auc_binary(&s, &l);
            if auc.is_none() {
                log::warn!("class {c} has no positives or no negatives; excluded from macro AUC");
            }
            auc
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    AucReport { per_class, macro_auc }
}

/// Unweighted mean of per-class F1 over classes in `include`.
pub fn macro_f1(pred: &[Vec<bool>], labels: &[Vec<bool>], include: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (c, &inc) in include.iter().enumerate() {
        if !inc {
            continue;
        }
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, l) in pred.iter().zip(labels) {
            match (p[c], l[c]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median pairwise Euclidean distance over the pooled sample.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(all.len() * (all.len().saturating_sub(1)) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    if d.is_empty() {
        0.0
    } else {
        median(d)
    }
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += (-gamma * sq_dist(x, y)).exp();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Squared maximum mean discrepancy, biased V-statistic, Gaussian kernel
/// with median-heuristic bandwidth. Falls back to bandwidth 1 when the
/// median distance is zero.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    assert!(!x.is_empty() && !y.is_empty(), "mmd needs nonempty samples");
    // Fixed argument order makes the floating-point result exactly symmetric.
    let (x, y) = if lex_le(x, y) { (x, y) } else { (y, x) };
    let mut h = median_bandwidth(x, y);
    if !(h > 0.0) {
        log::warn!("median pairwise distance is zero; using bandwidth 1.0");
        h = 1.0;
    }
    let gamma = 1.0 / (2.0 * h * h);
    let v = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    v.max(0.0)
}

fn lex_le(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            match x.total_cmp(y) {
                Ordering::Less => return true,
                Ordering::Greater => return false,
                Ordering::Equal => {}
            }
        }
        if ra.len() != rb.len() {
            return ra.len() < rb.len();
        }
    }
    a.len() <= b.len()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::nn::init_rng;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    n += 1.0;
                    s += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn separated_scores_give_one() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc_binary(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn independent_scores_near_half() {
        let mut rng = init_rng(4);
        let s: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.5)).collect();
        assert!((auc_binary(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn macro_skips_degenerate_class() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![true, false], vec![false, false]];
        let r = metric_auc(&scores, &labels);
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.macro_auc, 1.0);
    }

    #[test]
    fn f1_counts() {
        let pred = vec![vec![true, false], vec![true, false], vec![false, true]];
        let labels = vec![vec![true, false], vec![false, true], vec![false, true]];
        let f = macro_f1(&pred, &labels, &[true, true]);
        assert!((f - (2.0 / 3.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_identity_and_separation() {
        let mut rng = init_rng(8);
        let gauss = |rng: &mut rand_chacha::ChaCha8Rng, mu: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..2)
                        .map(|_| {
                            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                            mu + z
                        })
                        .collect()
                })
                .collect()
        };
        let x = gauss(&mut rng, 0.0, 200);
        assert!(mmd(&x, &x).abs() < 1e-12);
        let near = gauss(&mut rng, 1.0, 200);
        let far = gauss(&mut rng, 10.0, 200);
        assert!(mmd(&x, &far) > mmd(&x, &near));
    }

    /// Direct triple-loop kernel sums, median taken over the pooled set.
    fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
        let mut dists = Vec::new();
        for i in 0..pooled.len() {
            for j in 0..i {
                let mut s = 0.0;
                for k in 0..pooled[i].len() {
                    s += (pooled[i][k] - pooled[j][k]).powi(2);
                }
                dists.push(s.sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = dists.len();
        let h = if m % 2 == 1 { dists[m / 2] } else { (dists[m / 2 - 1] + dists[m / 2]) / 2.0 };
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let mut s = 0.0;
            for t in 0..a.len() {
                s += (a[t] - b[t]).powi(2);
            }
            (-s / (2.0 * h * h)).exp()
        };
        let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
        for a in x {
            for b in x {
                kxx += k(a, b);
            }
        }
        for a in y {
            for b in y {
                kyy += k(a, b);
            }
        }
        for a in x {
            for b in y {
                kxy += k(a, b);
            }
        }
        let (n, m) = (x.len() as f64, y.len() as f64);
        kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m)
    }

    #[test]
    fn mmd_matches_naive_oracle() {
        let mut rng = init_rng(21);
        for trial in 0..5 {
            let x: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let y: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..4).map(|_| rng.random::<f64>() * 1.5 + 0.1 * trial as f64).collect())
                .collect();
            assert!((mmd(&x, &y) - naive_mmd(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn mmd_fallback_bandwidth() {
        let x = vec![vec![1.0, 1.0]; 3];
        assert_eq!(mmd(&x, &x), 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_and_is_monotone_invariant(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc_binary(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-9);
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() - 7.0).collect();
            prop_assert!((a - auc_binary(&squashed, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mmd_is_exactly_symmetric(seed in 0u64..500, n in 1usize..12, m in 1usize..12) {
            let mut rng = init_rng(seed);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let y: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.random::<f64>() + 0.3).collect()).collect();
            let a = mmd(&x, &y);
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, mmd(&y, &x));
        }
    }
}
