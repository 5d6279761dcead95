use rand::seq::SliceRandom;

use super::clip::ClipRecord;
use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Seeded mini-batch iteration over one split.
///
/// Each epoch draws its own permutation from `(seed, epoch)`; the last batch
/// may be short.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    ids: Vec<String>,
    batch_size: usize,
    seed: u64,
}

impl BatchIterator {
    pub fn new(dataset: &Dataset, split: &str, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(Self { ids: dataset.manifest.split(split)?.to_vec(), batch_size, seed })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ids.len().div_ceil(self.batch_size)
    }

    /// Sample ids of every batch of `epoch`, in order.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<String>> {
        let mut ids = self.ids.clone();
        ids.shuffle(&mut stream(self.seed, &[0xBA7C, epoch as u64]));
        ids.chunks(self.batch_size).map(<[String]>::to_vec).collect()
    }

    /// Resolved `(clips, labels)` batches of `epoch`.
    pub fn epoch_batches<'d>(&self, dataset: &'d Dataset, epoch: usize) -> Vec<(Vec<&'d ClipRecord>, Vec<usize>)> {
        self.epoch(epoch)
            .into_iter()
            .map(|ids| {
                let clips: Vec<&ClipRecord> = ids.iter().map(|id| &dataset.clips[id]).collect();
                let labels = clips.iter().map(|c| c.label).collect();
                (clips, labels)
            })
            .collect()
    }
}
