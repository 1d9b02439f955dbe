//! Fractional subsampling of a training split.

use rand::Rng;

use super::{DatasetSplit, Split};
use crate::error::{Error, Result};

/// The fractions the subsampler accepts: 0.1%, 1%, 10% and 100%.
pub const FRACTIONS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
const DIVISORS: [usize; 4] = [1000, 100, 10, 1];

/// `floor(fraction * n)`, computed in integers so that `0.01 * n` can never
/// land a hair below a whole number.
pub fn sample_size(n: usize, fraction: f64) -> Result<usize> {
    FRACTIONS
        .iter()
        .position(|&f| f == fraction)
        .map(|i| n / DIVISORS[i])
        .ok_or_else(|| Error::Validation(format!("fraction {fraction} is not one of 0.001, 0.01, 0.1, 1.0")))
}

/// Sorted indices of a uniform sample without replacement.
pub fn subsample_indices<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    let k = sample_size(n, fraction)?;
    if k == 0 {
        return Err(Error::Validation(format!("sampling {fraction} of {n} examples leaves none")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Keeps a uniform random subset of a training split in its original order.
pub fn subsample<R: Rng + ?Sized>(split: &DatasetSplit, fraction: f64, rng: &mut R) -> Result<DatasetSplit> {
    if split.split != Split::Train {
        return Err(Error::Validation(format!(
            "subsampling applies to training data, not the {} split",
            split.split
        )));
    }
    let picked = subsample_indices(split.len(), fraction, rng)?;
    Ok(DatasetSplit {
        task_name: split.task_name.clone(),
        split: split.split,
        examples: picked.into_iter().map(|i| split.examples[i].clone()).collect(),
    })
}
