//! Batch Thompson sampling over surrogate predictions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::surrogate::ScorePrediction;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SelectError {
    #[error("no candidates to select from")]
    Empty,
    #[error("must select at least one candidate")]
    ZeroCount,
    #[error("candidate {0} has a negative or non-finite std")]
    BadStd(usize),
    #[error("candidate {0} has a non-finite mean")]
    BadMean(usize),
}

/// Draws one sample from `Normal(mean, std)` per candidate (a point mass
/// when `std == 0`) and returns the indices of the `count` largest draws,
/// largest first. Equal draws keep index order.
pub fn thompson_select<R: Rng + ?Sized>(
    predictions: &[ScorePrediction],
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SelectError> {
    if predictions.is_empty() {
        return Err(SelectError::Empty);
    }
    if count == 0 {
        return Err(SelectError::ZeroCount);
    }
    for (i, p) in predictions.iter().enumerate() {
        if !p.mean.is_finite() {
            return Err(SelectError::BadMean(i));
        }
        if !p.std.is_finite() || p.std < 0.0 {
            return Err(SelectError::BadStd(i));
        }
    }
    let draws: Vec<f64> = predictions
        .iter()
        .map(|p| {
            if p.std == 0.0 {
                p.mean
            } else {
                let z: f64 = StandardNormal.sample(rng);
                p.mean + p.std * z
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..draws.len()).collect();
    order.sort_by(|&a, &b| draws[b].total_cmp(&draws[a]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order)
}
