//! Skip-gram with negative sampling over code sequences.

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2vConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial SGD step, decayed linearly to 1e-4 of itself.
    pub lr: f64,
}

impl Default for W2vConfig {
    fn default() -> Self {
        W2vConfig {
            dim: 128,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two rows.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-300)
}

/// Trains input vectors for `vocab_size` codes starting from `init`
/// (`[vocab_size, dim]`). Zero epochs return `init` unchanged.
pub fn w2v_pretrain(
    sequences: &[Vec<usize>],
    init: Tensor,
    cfg: &W2vConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let vocab = init.rows();
    let dim = init.cols();
    if dim != cfg.dim {
        return Err(Error::dim(
            "w2v_pretrain",
            format!("init width {dim} vs dim {}", cfg.dim),
        ));
    }
    let mut counts = vec![0.0f64; vocab];
    for s in sequences {
        for &c in s {
            if c >= vocab {
                return Err(Error::Vocabulary(format!(
                    "code row {c} outside table of {vocab}"
                )));
            }
            counts[c] += 1.0;
        }
    }
    if counts.iter().filter(|&&c| c > 0.0).count() < 2 {
        return Err(Error::Input(
            "word2vec needs at least two distinct codes".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let noise: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let noise_total: f64 = noise.iter().sum();
    // cumulative table for inverse-CDF sampling
    let mut cdf = Vec::with_capacity(vocab);
    let mut acc = 0.0;
    for w in &noise {
        acc += w / noise_total;
        cdf.push(acc);
    }
    let sample_noise = |rng: &mut RngStream| {
        let u = rng.uniform();
        cdf.partition_point(|&c| c < u).min(vocab - 1)
    };

    let mut w_in = init.into_data();
    let mut w_out = vec![0.0; vocab * dim];
    let total_pairs: usize = cfg.epochs * sequences.iter().map(Vec::len).sum::<usize>();
    let mut seen = 0usize;
    let mut grad_in = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for s in sequences {
            for (i, &center) in s.iter().enumerate() {
                let lr = cfg.lr * (1.0 - seen as f64 / total_pairs as f64).max(1e-4);
                seen += 1;
                // reduced window as in the reference implementation
                let b = rng.below(cfg.window.max(1));
                let span = cfg.window - b;
                let lo = i.saturating_sub(span);
                let hi = (i + span + 1).min(s.len());
                for (j, &ctx) in s.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let cin = center * dim;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = sample_noise(rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let tout = target * dim;
                        let score = crate::tensor::sigmoid(dot(
                            &w_in[cin..cin + dim],
                            &w_out[tout..tout + dim],
                        ));
                        let g = (label - score) * lr;
                        for d in 0..dim {
                            grad_in[d] += g * w_out[tout + d];
                            w_out[tout + d] += g * w_in[cin + d];
                        }
                    }
                    for d in 0..dim {
                        w_in[cin + d] += grad_in[d];
                    }
                }
            }
        }
    }
    let out = Tensor::matrix(vocab, dim, w_in)?;
    if !out.all_finite() {
        return Err(Error::Numeric(
            "word2vec produced non-finite vectors".into(),
        ));
    }
    Ok(out)
}
