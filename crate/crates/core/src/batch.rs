//! Epoch-wise shuffled minibatch indices.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Yields batches of indices into `0..n`, reshuffling at every epoch
/// boundary. A batch that straddles a boundary is completed from the next
/// epoch, so every batch has exactly `batch` entries.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    pub epoch: u64,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::invalid("batch sampler needs a non-empty dataset and batch"));
        }
        let mut rng = rng_for(seed, &[0xBA7C]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler {
            n,
            batch,
            order,
            pos: 0,
            rng,
            epoch: 0,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let take = (self.batch - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// A permutation of `0..b` without fixed points: a cyclic shift by a random
/// offset in `1..b`.
pub fn random_derangement(b: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::invalid("a derangement needs at least two items"));
    }
    let k = rng.gen_range(1..b);
    Ok((0..b).map(|i| (i + k) % b).collect())
}
