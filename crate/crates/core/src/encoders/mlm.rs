//! Masked-token pretraining of a description encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Adam, ParamStore, RngStream, Tape};
use crate::text::{TokenSequence, DIGIT_BASE, MASK_ID};

use super::text::TextEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_frac: f64,
    pub mask_token: f64,
    pub random_token: f64,
    pub unchanged: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_frac: 0.15,
            mask_token: 0.8,
            random_token: 0.1,
            unchanged: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 5e-4,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_frac > 0.0 && self.mask_frac < 1.0) {
            return Err(Error::Config(format!(
                "mask fraction {} outside (0, 1)",
                self.mask_frac
            )));
        }
        let parts = [self.mask_token, self.random_token, self.unchanged];
        if parts.iter().any(|&p| p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "mask replacement fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("mlm batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Loss of every optimization step.
    pub losses: Vec<f64>,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    /// Entropy (nats) of the corpus unigram distribution over non-[CLS] tokens.
    pub unigram_entropy: f64,
}

impl MlmReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }
}

pub fn unigram_entropy(corpus: &[TokenSequence]) -> f64 {
    let mut counts: std::collections::HashMap<u32, f64> = std::collections::HashMap::new();
    let mut total = 0.0f64;
    for s in corpus {
        for &id in s.ids.iter().skip(1) {
            *counts.entry(id).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    let mut keys: Vec<u32> = counts.keys().copied().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|k| {
            let p = counts[k] / total;
            -p * p.ln()
        })
        .sum()
}

/// Masks one sequence; returns the corrupted copy and the masked positions.
fn corrupt(
    seq: &TokenSequence,
    cfg: &MlmConfig,
    vocab: usize,
    rng: &mut RngStream,
) -> (TokenSequence, Vec<usize>) {
    let mut out = seq.clone();
    let mut picked: Vec<usize> = (1..seq.ids.len())
        .filter(|_| rng.bernoulli(cfg.mask_frac))
        .collect();
    if picked.is_empty() && seq.ids.len() > 1 {
        picked.push(1 + rng.below(seq.ids.len() - 1));
    }
    for &p in &picked {
        let u = rng.uniform();
        if u < cfg.mask_token {
            out.ids[p] = MASK_ID;
        } else if u < cfg.mask_token + cfg.random_token {
            out.ids[p] = DIGIT_BASE + rng.below(vocab - DIGIT_BASE as usize) as u32;
        }
    }
    (out, picked)
}

/// Pretrains the encoder parameters in `store` with a whole-vocabulary
/// softmax head that is discarded afterwards. Parameter shapes are unchanged.
pub fn mlm_pretrain(
    encoder: &TextEncoder,
    store: &mut ParamStore,
    corpus: &[TokenSequence],
    use_places: bool,
    vocab_size: usize,
    cfg: &MlmConfig,
    rng: &mut RngStream,
) -> Result<MlmReport> {
    cfg.validate()?;
    let usable: Vec<&TokenSequence> = corpus.iter().filter(|s| s.ids.len() > 1).collect();
    if usable.is_empty() {
        return Err(Error::Input(
            "mlm corpus has no sequence with a maskable token".into(),
        ));
    }
    let mut work = store.clone();
    let dim = {
        let mut t = Tape::with_params(&work);
        let v = encoder.encode(&mut t, &usable[..1], use_places)?;
        t.value(v).cols()
    };
    let head = Linear::with_std(&mut work, "mlm_head", dim, vocab_size, 0.02, rng);
    let mut adam = Adam::new(&work, cfg.lr);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::new();
    let mut last_epoch = Vec::new();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        last_epoch.clear();
        for chunk in order.chunks(cfg.batch_size) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            let mut off = 0;
            for &i in chunk {
                let (s, picked) = corrupt(usable[i], cfg, vocab_size, rng);
                for p in picked {
                    rows.push(off + p);
                    targets.push(usable[i].ids[p] as usize);
                }
                off += s.ids.len();
                seqs.push(s);
            }
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let grads = {
                let mut tape = Tape::with_params(&work);
                let h = encoder.encode_tokens(&mut tape, &refs, use_places)?;
                let h = tape.gather(h, &rows)?;
                let logits = head.forward(&mut tape, h)?;
                let loss = tape.cross_entropy(logits, &targets)?;
                let l = tape.value(loss).item();
                losses.push(l);
                last_epoch.push(l);
                tape.backward(loss)?.into_params()
            };
            adam.step(&mut work, &grads)?;
        }
    }
    store.load_matching(&work)?;
    let final_loss = if last_epoch.is_empty() {
        f64::NAN
    } else {
        last_epoch.iter().sum::<f64>() / last_epoch.len() as f64
    };
    Ok(MlmReport {
        losses,
        final_loss,
        unigram_entropy: unigram_entropy(corpus),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderKind, TextEncoderConfig};
    use crate::text::digit_place_indices;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            places: digit_place_indices(ids),
        }
    }

    fn tiny(vocab: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: vocab,
            dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            rnn_hidden: 16,
            max_len: 12,
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let cfg = MlmConfig {
            mask_frac: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = MlmConfig {
            mask_token: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn entropy_of_uniform_tokens() {
        let c = vec![seq(&[1, 20, 21]), seq(&[1, 22, 23])];
        assert!((unigram_entropy(&c) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn memorizes_repeated_sentence() {
        for kind in [EncoderKind::Transformer, EncoderKind::Rnn] {
            let mut rng = RngStream::new(0);
            let mut store = ParamStore::new();
            let enc = TextEncoder::new(kind, &mut store, &tiny(40), &mut rng).unwrap();
            let before = store.shapes();
            let corpus = vec![seq(&[1, 20, 21, 22, 23]); 32];
            let cfg = MlmConfig {
                epochs: 150,
                batch_size: 16,
                lr: 5e-3,
                ..Default::default()
            };
            let rep = mlm_pretrain(&enc, &mut store, &corpus, false, 40, &cfg, &mut rng).unwrap();
            assert!(
                (rep.initial_loss() - 40f64.ln()).abs() < 0.05 * 40f64.ln(),
                "{}",
                rep.initial_loss()
            );
            assert!(rep.final_loss < 0.1, "{kind}: {}", rep.final_loss);
            assert_eq!(store.shapes(), before);
            assert!(store.id("mlm_head.weight").is_none());
        }
    }
}
