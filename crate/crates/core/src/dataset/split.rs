use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(floor(0.6 n), floor(0.2 n), remainder)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

/// Seeded shuffle followed by a 60/20/20 cut.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Validation(format!("cannot split {n} items into three parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(n);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..a]), pick(&order[a..a + b]), pick(&order[a + b..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_sizes() {
        assert_eq!(split_sizes(386), (231, 77, 78));
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(200), (120, 40, 40));
    }

    #[test]
    fn too_few_items() {
        assert!(matches!(split_dataset(&[1, 2], 0), Err(Error::Validation(_))));
    }

    #[test]
    fn deterministic_in_seed() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(split_dataset(&items, 3).unwrap(), split_dataset(&items, 3).unwrap());
        assert_ne!(split_dataset(&items, 3).unwrap(), split_dataset(&items, 4).unwrap());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 3usize..400, seed in 0u64..100) {
            let items: Vec<usize> = (0..n).collect();
            let (a, b, c) = split_dataset(&items, seed).unwrap();
            prop_assert_eq!((a.len(), b.len(), c.len()), split_sizes(n));
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
