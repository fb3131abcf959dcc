use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, SampleRecord};

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; only the last batch can be short.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// [`batch_indices`] over records, yielding image ids.
pub fn make_batches(
    records: &[SampleRecord],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<String>>, DatasetError> {
    Ok(batch_indices(records.len(), batch_size, seed, epoch)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| records[i].image_id.clone()).collect())
        .collect())
}

/// Round-robin slice of `items` for `worker` out of `num_workers`.
pub fn shard<T: Clone>(items: &[T], worker: usize, num_workers: usize) -> Result<Vec<T>, DatasetError> {
    if worker >= num_workers {
        return Err(DatasetError::Config(format!(
            "worker {worker} out of range for {num_workers} workers"
        )));
    }
    Ok(items.iter().skip(worker).step_by(num_workers).cloned().collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn records(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord {
                image_id: format!("img{i}"),
                patient_id: format!("p{i}"),
                labels: [0; 14],
                split: None,
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let b = make_batches(&records(100), 32, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [32, 32, 32, 4]);
        assert!(make_batches(&[], 32, 1, 0).unwrap().is_empty());
        assert!(make_batches(&records(3), 0, 1, 0).is_err());
    }

    #[test]
    fn same_seed_and_epoch_same_order() {
        let rs = records(40);
        assert_eq!(make_batches(&rs, 8, 9, 3).unwrap(), make_batches(&rs, 8, 9, 3).unwrap());
    }

    #[test]
    fn epochs_reshuffle() {
        let rs = records(20);
        let e0: Vec<String> = make_batches(&rs, 20, 4, 0).unwrap().concat();
        let e1: Vec<String> = make_batches(&rs, 20, 4, 1).unwrap().concat();
        assert_ne!(e0, e1);
        assert_eq!(e0.iter().collect::<BTreeSet<_>>(), e1.iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn shard_examples() {
        let items = [0, 1, 2, 3];
        assert_eq!(shard(&items, 0, 2).unwrap(), [0, 2]);
        assert_eq!(shard(&items, 1, 2).unwrap(), [1, 3]);
        assert_eq!(shard(&items, 0, 1).unwrap(), items);
        let five = [0, 1, 2, 3, 4];
        assert_eq!(shard(&five, 0, 2).unwrap().len(), 3);
        assert_eq!(shard(&five, 1, 2).unwrap().len(), 2);
        assert!(shard(&five, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn shards_partition_input(items in prop::collection::vec(any::<u32>(), 0..60), k in 1usize..=8) {
            let mut union: Vec<(usize, u32)> = Vec::new();
            let tagged: Vec<(usize, u32)> = items.iter().copied().enumerate().collect();
            let mut sizes = Vec::new();
            for w in 0..k {
                let s = shard(&tagged, w, k).unwrap();
                sizes.push(s.len());
                union.extend(s);
            }
            union.sort();
            prop_assert_eq!(union, tagged);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn batches_cover_split(n in 0usize..200, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..100) {
            let batches = batch_indices(n, bs, seed, epoch).unwrap();
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for b in batches.iter().rev().skip(1) {
                prop_assert_eq!(b.len(), bs);
            }
        }
    }
}
