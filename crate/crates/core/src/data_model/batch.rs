use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index batches over `len` items for one epoch.
#[derive(Clone, Debug)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl Batches {
    pub fn new(len: usize, batch_size: usize, shuffle: bool, seed: u64, drop_last: bool) -> Self {
        assert!(batch_size > 0, "batch_size must be positive");
        let mut order: Vec<usize> = (0..len).collect();
        if shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Self {
            order,
            batch_size,
            drop_last,
            pos: 0,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Batches of references. The short final batch is kept; pretraining drops
/// it through [`Batches`] with `drop_last`.
pub fn batch_iterator<T>(
    items: &[T],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> impl Iterator<Item = Vec<&T>> + '_ {
    Batches::new(items.len(), batch_size, shuffle, seed, false)
        .map(move |idx| idx.into_iter().map(|i| &items[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_by_48_gives_48_48_4() {
        let items: Vec<u32> = (0..100).collect();
        let sizes: Vec<usize> = batch_iterator(&items, 48, true, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![48, 48, 4]);
        assert_eq!(Batches::new(100, 48, false, 0, true).count(), 2);
    }

    #[test]
    fn unshuffled_preserves_order() {
        let items: Vec<u32> = (0..10).collect();
        let flat: Vec<u32> = batch_iterator(&items, 3, false, 7).flatten().copied().collect();
        assert_eq!(flat, items);
    }

    #[test]
    fn shuffled_is_seeded_and_covers_everything() {
        let items: Vec<u32> = (0..57).collect();
        let a: Vec<Vec<u32>> = batch_iterator(&items, 8, true, 11).map(|b| b.into_iter().copied().collect()).collect();
        let b: Vec<Vec<u32>> = batch_iterator(&items, 8, true, 11).map(|b| b.into_iter().copied().collect()).collect();
        assert_eq!(a, b);
        let mut flat: Vec<u32> = a.concat();
        assert_ne!(flat, items);
        flat.sort();
        assert_eq!(flat, items);
    }

    #[test]
    fn empty_input_gives_empty_stream() {
        let items: Vec<u32> = vec![];
        assert_eq!(batch_iterator(&items, 4, true, 0).count(), 0);
    }
}
