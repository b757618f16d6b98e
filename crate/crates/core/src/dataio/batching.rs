use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle of `0..n` cut into batches of `batch`; a final batch of
/// one entry joins the previous batch.
pub fn make_batches(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch < 2 {
        return Err(Error::input("batch size must be at least 2 for in-batch negatives"));
    }
    if n < 2 {
        return Err(Error::input(format!("need at least 2 entries to batch, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    Ok(batches)
}

/// Uniform pick among the other `len - 1` positions of a batch.
pub fn pick_negative<R: Rng + ?Sized>(rng: &mut R, len: usize, pos: usize) -> usize {
    debug_assert!(len >= 2 && pos < len);
    let k = rng.random_range(0..len - 1);
    if k >= pos {
        k + 1
    } else {
        k
    }
}
