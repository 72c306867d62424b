//! Seeded train/validation/test partition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Sizes of a 65/15/20 partition: floor for train and valid, remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 65 / 100;
    let valid = n * 15 / 100;
    (train, valid, n - train - valid)
}

/// Shuffles `samples` with `seed` and partitions them 65/15/20.
pub fn split_dataset<T: Clone>(samples: &[T], seed: u64) -> Result<Split<T>> {
    if samples.len() < 20 {
        return Err(Error::Input(format!(
            "{} samples is below the 20 needed for a split",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    RngStream::new(seed)
        .split_named("split")
        .shuffle(&mut order);
    let (ntr, nva, _) = split_sizes(samples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(Split {
        train: pick(&order[..ntr]),
        valid: pick(&order[ntr..ntr + nva]),
        test: pick(&order[ntr + nva..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(100), (65, 15, 20));
        assert_eq!(split_sizes(20), (13, 3, 4));
        assert!(split_dataset(&[0u8; 19], 0).is_err());
    }

    #[test]
    fn seeded() {
        let v: Vec<u32> = (0..50).collect();
        assert_eq!(split_dataset(&v, 3).unwrap(), split_dataset(&v, 3).unwrap());
        assert_ne!(split_dataset(&v, 3).unwrap(), split_dataset(&v, 4).unwrap());
    }
}
