use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded train/test partition.
///
/// Shuffles indices with Fisher-Yates driven by ChaCha8 and takes the first
/// `n_test` as the test set. Both parts keep the input order.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64, n_test: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n_test >= items.len() && !(n_test == 0 && items.is_empty()) {
        return Err(Error::invalid(format!(
            "n_test {n_test} must be smaller than the dataset size {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut is_test = vec![false; items.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(items.len() - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (item, t) in items.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_325_into_265_and_60() {
        let items: Vec<u32> = (0..325).collect();
        let (train, test) = split_dataset(&items, 1, 60).unwrap();
        assert_eq!((train.len(), test.len()), (265, 60));
    }

    #[test]
    fn zero_test_and_errors() {
        let items: Vec<u32> = (0..5).collect();
        let (train, test) = split_dataset(&items, 1, 0).unwrap();
        assert_eq!(train, items);
        assert!(test.is_empty());
        assert!(split_dataset(&items, 1, 5).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(split_dataset(&items, 3, 10).unwrap(), split_dataset(&items, 3, 10).unwrap());
        assert_ne!(split_dataset(&items, 3, 10).unwrap(), split_dataset(&items, 4, 10).unwrap());
    }
}
