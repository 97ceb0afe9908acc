//! Deterministic batch scheduling and clip-to-tensor packing.

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;

use super::{LandmarkClip, LatentClip};
use crate::util::rng_for;

/// Endless drop-last batch scheduler over `n` items.
///
/// Every pass over the pool reshuffles with a seed derived from
/// `(seed, epoch, pass)`, so one epoch can draw more batches than a single
/// pass provides. A pool smaller than the batch size yields no batches;
/// [`BatchCycler::next_batch`] then returns `None` and the caller decides
/// how to proceed.
pub struct BatchCycler {
    n: usize,
    size: usize,
    seed: u64,
    stream_tag: u64,
    epoch: usize,
    pass: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    pub fn new(n: usize, size: usize, seed: u64, stream_tag: u64, epoch: usize) -> Self {
        assert!(size >= 1, "batch size must be >= 1");
        let mut c = BatchCycler {
            n,
            size,
            seed,
            stream_tag,
            epoch,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng_for(
            self.seed,
            &[self.stream_tag, self.epoch as u64, self.pass as u64],
        ));
        self.pos = 0;
    }

    /// Number of full batches a single pass over the pool yields.
    pub fn batches_per_pass(&self) -> usize {
        self.n / self.size
    }

    pub fn next_batch(&mut self) -> Option<Vec<usize>> {
        if self.n < self.size {
            return None;
        }
        if self.pos + self.size > self.n {
            self.pass += 1;
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        Some(b)
    }
}

/// Packs landmark clips into an NCHW tensor `[n, 3, 30, 68]`.
pub fn landmark_batch(clips: &[&LandmarkClip]) -> ArrayD<f64> {
    let n = clips.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, 3, 30, 68]));
    for (i, clip) in clips.iter().enumerate() {
        let f = clip.frames();
        for t in 0..30 {
            for p in 0..68 {
                for a in 0..3 {
                    out[[i, a, t, p]] = f[(t, p, a)] as f64;
                }
            }
        }
    }
    out
}

/// Packs latent clips into an NCHW tensor `[n, 1, 30, 50]`.
pub fn latent_batch(clips: &[&LatentClip]) -> ArrayD<f64> {
    let n = clips.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, 1, 30, 50]));
    for (i, clip) in clips.iter().enumerate() {
        let l = clip.latents();
        for t in 0..30 {
            for v in 0..50 {
                out[[i, 0, t, v]] = l[(t, v, 0)] as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream;

    fn collect_pass(c: &mut BatchCycler, batches: usize) -> Vec<Vec<usize>> {
        (0..batches).map(|_| c.next_batch().unwrap()).collect()
    }

    #[test]
    fn pool_24_size_12_gives_two_batches_per_pass() {
        let mut c = BatchCycler::new(24, 12, 5, stream::BATCH_LABELED, 0);
        assert_eq!(c.batches_per_pass(), 2);
        let bs = collect_pass(&mut c, 2);
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn pool_25_size_12_drops_the_last_example_each_pass() {
        let mut c = BatchCycler::new(25, 12, 5, stream::BATCH_LABELED, 0);
        assert_eq!(c.batches_per_pass(), 2);
        let bs = collect_pass(&mut c, 2);
        assert_eq!(bs.concat().len(), 24);
        // The next call rolls into a fresh shuffled pass.
        assert_eq!(c.next_batch().unwrap().len(), 12);
    }

    #[test]
    fn pool_120_size_120_is_one_full_batch() {
        let mut c = BatchCycler::new(120, 120, 1, stream::BATCH_UNLABELED, 0);
        assert_eq!(c.batches_per_pass(), 1);
        assert_eq!(c.next_batch().unwrap().len(), 120);
    }

    #[test]
    fn undersized_pool_yields_no_batches() {
        let mut c = BatchCycler::new(3, 12, 1, stream::BATCH_UNLABELED, 0);
        assert_eq!(c.batches_per_pass(), 0);
        assert!(c.next_batch().is_none());
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let b1 = BatchCycler::new(30, 10, 7, stream::BATCH_LABELED, 2).next_batch().unwrap();
        let b2 = BatchCycler::new(30, 10, 7, stream::BATCH_LABELED, 2).next_batch().unwrap();
        let b3 = BatchCycler::new(30, 10, 7, stream::BATCH_LABELED, 3).next_batch().unwrap();
        assert_eq!(b1, b2);
        assert_ne!(b1, b3);
    }
}
