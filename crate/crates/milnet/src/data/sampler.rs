//! Minibatch samplers: the balanced half-and-half stream for the detector
//! and the conventional shuffled stream for the tagger.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mix a base seed with an epoch index into an independent stream seed.
fn epoch_seed(base: u64, epoch: usize) -> u64 {
    // splitmix64 finaliser.
    let mut z = base ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Balanced sampler: every minibatch holds equally many positive and
/// negative recordings. Per epoch the *majority* polarity is shuffled and
/// consumed exactly once; each batch fills its other half by sampling the
/// minority polarity uniformly with replacement. A trailing group smaller
/// than `batch/2` yields one short batch that is still exactly half
/// positive.
pub struct HnhSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    half_batch: usize,
    seed: u64,
}

impl HnhSampler {
    pub fn new(is_positive: &[bool], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::Data(format!(
                "half-and-half batches need an even size >= 2, got {batch_size}"
            )));
        }
        let positives: Vec<usize> = (0..is_positive.len()).filter(|&i| is_positive[i]).collect();
        let negatives: Vec<usize> = (0..is_positive.len()).filter(|&i| !is_positive[i]).collect();
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::Data(format!(
                "half-and-half input needs both polarities: {} positive, {} negative",
                positives.len(),
                negatives.len()
            )));
        }
        Ok(HnhSampler {
            positives,
            negatives,
            half_batch: batch_size / 2,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.positives.len().max(self.negatives.len()).div_ceil(self.half_batch)
    }

    /// The batches of one epoch, as indices into the original recording
    /// list. Deterministic in `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, epoch));
        let pos_is_majority = self.positives.len() >= self.negatives.len();
        let (majority, minority) = if pos_is_majority {
            (&self.positives, &self.negatives)
        } else {
            (&self.negatives, &self.positives)
        };
        let mut maj = majority.clone();
        maj.shuffle(&mut rng);
        let mut min_seq = minority.clone();
        min_seq.shuffle(&mut rng);
        let balanced = majority.len() == minority.len();
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for (chunk_idx, chunk) in maj.chunks(self.half_batch).enumerate() {
            let mut batch: Vec<usize> = chunk.to_vec();
            for k in 0..chunk.len() {
                if balanced {
                    // Equal counts: both polarities are covered exactly once.
                    batch.push(min_seq[chunk_idx * self.half_batch + k]);
                } else {
                    batch.push(minority[rng.random_range(0..minority.len())]);
                }
            }
            batch.shuffle(&mut rng);
            batches.push(batch);
        }
        batches
    }
}

/// Conventional sampler: a fresh shuffle each epoch, sequential batches,
/// trailing short batch kept.
pub struct PlainSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl PlainSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("cannot sample from an empty set".into()));
        }
        if batch_size == 0 {
            return Err(Error::Data("batch size must be positive".into()));
        }
        Ok(PlainSampler { n, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, epoch));
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng);
        idx.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}
