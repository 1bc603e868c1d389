use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EcgTextPair;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Misaligned {
    pub pairs: Vec<EcgTextPair>,
    /// Positions whose description was moved, ascending.
    pub selected: Vec<usize>,
    pub warning: Option<String>,
}

/// Moves the descriptions of `floor(ratio * N)` uniformly chosen pairs by a
/// uniform random derangement of the selection. Mismatch is positional: two
/// selected pairs that happen to carry identical text stay textually equal.
pub fn inject_misalignment(pairs: &[EcgTextPair], ratio: f64, seed: u64) -> Result<Misaligned> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("misalignment ratio {ratio} outside [0, 1]")));
    }
    let n = pairs.len();
    // The epsilon keeps decimal ratios such as 0.3 from flooring one short.
    let mut k = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut warning = None;
    if k == 0 {
        return Ok(Misaligned {
            pairs: pairs.to_vec(),
            selected: Vec::new(),
            warning,
        });
    }
    if n < 2 {
        return Err(Error::Argument("misalignment needs at least 2 pairs".into()));
    }
    if k == 1 {
        k = 2;
        let msg = format!("ratio {ratio} of {n} pairs selects one pair; deranging 2 instead");
        log::warn!("{msg}");
        warning = Some(msg);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = index::sample(&mut rng, n, k).into_vec();
    selected.sort_unstable();

    // Rejection sampling gives a uniform derangement in ~e attempts.
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }

    let mut out = pairs.to_vec();
    for (slot, &src) in perm.iter().enumerate() {
        out[selected[slot]].description = pairs[selected[src]].description.clone();
    }
    Ok(Misaligned {
        pairs: out,
        selected,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::data_model::{EcgRecord, Signal, SourceTag};

    fn pairs(n: usize) -> Vec<EcgTextPair> {
        (0..n)
            .map(|i| {
                let rec = EcgRecord::new(format!("r{i}"), Signal::new(1, 1, vec![i as f32]).unwrap(), 500);
                EcgTextPair::new(Arc::new(rec), format!("description {i}"), SourceTag::Synthetic).unwrap()
            })
            .collect()
    }

    fn mismatches(a: &[EcgTextPair], b: &[EcgTextPair]) -> usize {
        a.iter().zip(b).filter(|(x, y)| x.description != y.description).count()
    }

    #[test]
    fn ratio_zero_is_identity() {
        let p = pairs(10);
        let out = inject_misalignment(&p, 0.0, 1).unwrap();
        assert_eq!(mismatches(&p, &out.pairs), 0);
    }

    #[test]
    fn ratio_one_moves_every_description() {
        let p = pairs(10);
        let out = inject_misalignment(&p, 1.0, 9).unwrap();
        assert_eq!(mismatches(&p, &out.pairs), 10);
        let mut before: Vec<_> = p.iter().map(|x| x.description.clone()).collect();
        let mut after: Vec<_> = out.pairs.iter().map(|x| x.description.clone()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn half_of_one_hundred_moves_exactly_fifty() {
        let p = pairs(100);
        let out = inject_misalignment(&p, 0.5, 3).unwrap();
        assert_eq!(mismatches(&p, &out.pairs), 50);
        // records never move, only text
        for (a, b) in p.iter().zip(&out.pairs) {
            assert_eq!(a.record.record_id, b.record.record_id);
        }
    }

    #[test]
    fn single_selection_is_widened_to_two_with_warning() {
        let p = pairs(10);
        let out = inject_misalignment(&p, 0.1, 0).unwrap();
        assert_eq!(mismatches(&p, &out.pairs), 2);
        assert!(out.warning.is_some());
    }

    #[test]
    fn bad_arguments() {
        assert!(inject_misalignment(&pairs(4), 1.5, 0).is_err());
        assert!(inject_misalignment(&pairs(4), -0.1, 0).is_err());
        assert!(inject_misalignment(&pairs(1), 1.0, 0).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let p = pairs(30);
        let a = inject_misalignment(&p, 0.4, 5).unwrap();
        let b = inject_misalignment(&p, 0.4, 5).unwrap();
        let texts = |m: &Misaligned| m.pairs.iter().map(|x| x.description.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&a), texts(&b));
    }

    proptest! {
        #[test]
        fn mismatch_count_is_floor_ratio_n(n in 2usize..120, tenths in 0usize..=10, seed in any::<u64>()) {
            let ratio = tenths as f64 / 10.0;
            let p = pairs(n);
            let out = inject_misalignment(&p, ratio, seed).unwrap();
            let k = (ratio * n as f64 + 1e-9).floor() as usize;
            let expected = if k == 1 { 2 } else { k };
            prop_assert_eq!(mismatches(&p, &out.pairs), expected);
            prop_assert_eq!(out.pairs.len(), n);
        }
    }
}
