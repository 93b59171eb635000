use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::device;

/// A mini-batch split into two halves; row `k` of each half forms pair `k`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub first_half: Tensor,
    pub second_half: Tensor,
    /// Original batch rows: `permutation[..B/2]` went to the first half.
    pub permutation: Vec<usize>,
}

impl PairBatch {
    pub fn num_pairs(&self) -> usize {
        self.permutation.len() / 2
    }
}

/// Randomly permutes the batch and splits it into two disjoint halves.
pub fn make_pair_batch(batch: &Tensor, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
    let b = batch.dims().first().copied().unwrap_or(0);
    if b < 2 || b % 2 != 0 {
        return Err(Error::invalid(format!("pair batching needs an even batch size >= 2, got {b}")));
    }
    let mut permutation: Vec<usize> = (0..b).collect();
    permutation.shuffle(rng);
    let half = b / 2;
    let take = |rows: &[usize]| -> Result<Tensor> {
        let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
        Ok(batch.index_select(&Tensor::new(idx.as_slice(), &device())?, 0)?)
    };
    Ok(PairBatch {
        first_half: take(&permutation[..half])?,
        second_half: take(&permutation[half..])?,
        permutation,
    })
}
