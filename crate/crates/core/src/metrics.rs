//! Average-precision metrics.
//!
//! Scores are ranked descending; equal scores keep the order of a seeded
//! pre-shuffle so ties are unbiased and reproducible.

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Seed of the tie-breaking pre-shuffle used by [`auprc`].
pub const TIE_SEED: u64 = 0x7135;

/// Position of each item in the seeded pre-shuffle of `0..n`.
pub fn tie_positions(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut order);
    let mut pos = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    pos
}

fn check(scores: &[f64], labels: &[f64]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "auprc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input(format!("label {y} is not 0 or 1")));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 {
        return Err(Error::Metric(
            "AUPRC is undefined without positive labels".into(),
        ));
    }
    Ok(positives)
}

/// Average precision with ties broken by the pre-shuffle of `seed`.
pub fn auprc_seeded(scores: &[f64], labels: &[f64], seed: u64) -> Result<f64> {
    let positives = check(scores, labels)?;
    let pos = tie_positions(scores.len(), seed);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(pos[a].cmp(&pos[b])));
    let mut tp = 0.0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            tp += 1.0;
            sum += tp / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    auprc_seeded(scores, labels, TIE_SEED)
}

/// AUPRC over every (sample, class) pair of a multi-label problem.
pub fn micro_auprc(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(Error::dim(
            "micro_auprc",
            format!("{:?} vs {:?}", scores.shape(), labels.shape()),
        ));
    }
    auprc(scores.data(), labels.data())
}
