use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ExposureDataset, GroundTruth};
use crate::seed;
use crate::{Error, Result};

/// One side of a train/test partition; `indices` point into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dataset: ExposureDataset,
    pub ground_truth: Option<GroundTruth>,
    pub indices: Vec<usize>,
}

/// Seeded random partition; `test_fraction` of the rows (rounded) go to test.
///
/// Both sides keep the source order. Returns `(train, test)`.
pub fn split_train_test(
    dataset: &ExposureDataset,
    ground_truth: Option<&GroundTruth>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Split, Split)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    if let Some(gt) = ground_truth {
        if gt.len() != dataset.len() {
            return Err(Error::Input(format!("ground truth has {} rows, dataset {}", gt.len(), dataset.len())));
        }
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Config(format!("test fraction {test_fraction} of {n} rows leaves an empty split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "split"));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_test[i]);
    let side = |idx: Vec<usize>| Split {
        dataset: dataset.subset(&idx),
        ground_truth: ground_truth.map(|g| g.subset(&idx)),
        indices: idx,
    };
    Ok((side(train_idx), side(test_idx)))
}

/// Which records a training loop draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSpace {
    /// Clicked records only (O).
    Click,
    /// Every exposure (D).
    Exposure,
}

/// Seeded per-epoch shuffling over one sample space.
#[derive(Debug, Clone)]
pub struct Batcher {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(dataset: &ExposureDataset, batch_size: usize, seed: u64, space: SampleSpace) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let pool = match space {
            SampleSpace::Click => dataset.click_indices(),
            SampleSpace::Exposure => (0..dataset.len()).collect(),
        };
        if pool.is_empty() {
            return Err(Error::Input(format!("{space:?} space is empty; nothing to batch")));
        }
        Ok(Batcher { pool, batch_size, seed })
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order = self.pool.clone();
        order.shuffle(&mut seed::rng_indexed(self.seed, "batches", epoch as u64));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Index batches for one epoch.
pub fn batches(
    dataset: &ExposureDataset,
    batch_size: usize,
    seed: u64,
    space: SampleSpace,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    Ok(Batcher::new(dataset, batch_size, seed, space)?.epoch(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InteractionRecord, Vocab};

    fn dataset(n: usize) -> ExposureDataset {
        let records = (0..n)
            .map(|i| InteractionRecord {
                group_key: i as u64,
                click: i % 3 == 0,
                conversion: i % 6 == 0,
                user_feats: vec![i as u32],
                item_feats: vec![0],
                comb_feats: vec![0],
            })
            .collect();
        ExposureDataset::new(records, Vocab { user: n, item: 1, comb: 1 }).unwrap()
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let ds = dataset(100);
        assert!(split_train_test(&ds, None, 0.0, 1).is_err());
        assert!(split_train_test(&ds, None, 1.0, 1).is_err());
        assert!(split_train_test(&dataset(3), None, 0.1, 1).is_err());
    }

    #[test]
    fn half_split_sizes() {
        let (train, test) = split_train_test(&dataset(100), None, 0.5, 9).unwrap();
        assert_eq!((train.dataset.len(), test.dataset.len()), (50, 50));
    }

    #[test]
    fn ground_truth_follows_records() {
        let ds = dataset(40);
        let gt = GroundTruth::new(
            (0..40).map(|i| (i + 1) as f64 / 41.0).collect(),
            (0..40).map(|i| i % 6 == 0).collect(),
            (0..40).map(|i| i as f64).collect(),
        )
        .unwrap();
        let (train, test) = split_train_test(&ds, Some(&gt), 0.25, 3).unwrap();
        for side in [&train, &test] {
            let g = side.ground_truth.as_ref().unwrap();
            for (k, &i) in side.indices.iter().enumerate() {
                assert_eq!(g.confounder[k], i as f64);
                assert_eq!(side.dataset.records()[k], ds.records()[i]);
            }
        }
    }

    #[test]
    fn click_space_batches_only_clicks() {
        let ds = dataset(30);
        for b in batches(&ds, 4, 1, SampleSpace::Click, 0).unwrap() {
            assert!(b.iter().all(|&i| ds.records()[i].click));
        }
        let all = batches(&ds, 1000, 1, SampleSpace::Exposure, 0).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].len(), 30);
    }

    #[test]
    fn seeded_and_epoch_dependent() {
        let ds = dataset(50);
        let a = batches(&ds, 7, 5, SampleSpace::Exposure, 0).unwrap();
        assert_eq!(a, batches(&ds, 7, 5, SampleSpace::Exposure, 0).unwrap());
        assert_ne!(a, batches(&ds, 7, 5, SampleSpace::Exposure, 1).unwrap());
    }

    #[test]
    fn empty_space_and_zero_batch_are_errors() {
        let records = vec![InteractionRecord {
            group_key: 0,
            click: false,
            conversion: false,
            user_feats: vec![0],
            item_feats: vec![0],
            comb_feats: vec![0],
        }];
        let ds = ExposureDataset::new(records, Vocab { user: 1, item: 1, comb: 1 }).unwrap();
        assert!(batches(&ds, 4, 0, SampleSpace::Click, 0).is_err());
        assert!(batches(&ds, 0, 0, SampleSpace::Exposure, 0).is_err());
    }
}
