//! Description encoders `B_phi`: a small pre-norm transformer and a
//! bidirectional GRU, both reading sub-word ids plus optional digit places.

use crate::error::{Error, Result};
use crate::nn::{Gru, LayerNorm, Linear};
use crate::tensor::{init, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::text::{TokenSequence, MAX_TOKENS, PLACE_MAX, PLACE_MIN, PLACE_SLOTS};

use super::EncoderKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub rnn_hidden: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            dim: 128,
            layers: 2,
            heads: 2,
            ff_dim: 512,
            rnn_hidden: 128,
            max_len: MAX_TOKENS,
        }
    }
}

const PREFIX: &str = "encoder";

/// Token embedding plus additive digit-place embedding.
#[derive(Debug, Clone)]
struct TokenEmbedder {
    tokens: ParamId,
    places: ParamId,
    dim: usize,
}

impl TokenEmbedder {
    fn new(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut RngStream) -> Self {
        TokenEmbedder {
            tokens: store.insert(
                format!("{PREFIX}.token_emb"),
                init::normal(&[cfg.vocab_size, cfg.dim], 0.1, rng),
            ),
            places: store.insert(
                format!("{PREFIX}.place_emb"),
                init::normal(&[PLACE_SLOTS, cfg.dim], 0.1, rng),
            ),
            dim: cfg.dim,
        }
    }

    fn bind(store: &ParamStore) -> Option<Self> {
        let tokens = store.id(&format!("{PREFIX}.token_emb"))?;
        Some(TokenEmbedder {
            tokens,
            places: store.id(&format!("{PREFIX}.place_emb"))?,
            dim: store.get(tokens).cols(),
        })
    }

    /// `[total_tokens, dim]` embeddings of the packed sequences.
    fn embed(&self, tape: &mut Tape, seqs: &[&TokenSequence], use_places: bool) -> Result<Var> {
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.ids.iter().map(|&i| i as usize))
            .collect();
        let table = tape.param(self.tokens);
        let x = tape.gather(table, &ids)?;
        if !use_places {
            return Ok(x);
        }
        let mut slots = Vec::with_capacity(ids.len());
        for s in seqs {
            for p in &s.places {
                slots.push(match *p {
                    None => PLACE_SLOTS,
                    Some(p) if (PLACE_MIN..=PLACE_MAX).contains(&p) => (p - PLACE_MIN) as usize,
                    Some(p) => {
                        return Err(Error::Contract(format!(
                            "digit place {p} outside [{PLACE_MIN}, {PLACE_MAX}]"
                        )))
                    }
                });
            }
        }
        if slots.iter().all(|&s| s == PLACE_SLOTS) {
            return Ok(x);
        }
        // extra zero row for non-digit tokens
        let places = tape.param(self.places);
        let zero = tape.constant(Tensor::zeros(&[1, self.dim]));
        let table = tape.concat(&[places, zero], 0)?;
        let d = tape.gather(table, &slots)?;
        tape.add(x, d)
    }
}

fn check_seqs(seqs: &[&TokenSequence], max_len: usize) -> Result<()> {
    for s in seqs {
        if s.ids.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if s.ids.len() > max_len || s.places.len() != s.ids.len() {
            return Err(Error::Contract(format!(
                "token sequence of length {} (places {}) exceeds limit {max_len}",
                s.ids.len(),
                s.places.len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    embed: TokenEmbedder,
    positions: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    heads: usize,
    max_len: usize,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut RngStream) -> Self {
        let embed = TokenEmbedder::new(store, cfg, rng);
        let positions = store.insert(
            format!("{PREFIX}.pos_emb"),
            init::normal(&[cfg.max_len, cfg.dim], 0.1, rng),
        );
        let d = cfg.dim;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{PREFIX}.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    qkv: Linear::new(store, &format!("{p}.qkv"), d, 3 * d, rng),
                    out: Linear::new(store, &format!("{p}.attn_out"), d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.ff_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ff_dim, d, rng),
                }
            })
            .collect();
        TransformerEncoder {
            embed,
            positions,
            blocks,
            final_ln: LayerNorm::new(store, &format!("{PREFIX}.ln_final"), d),
            heads: cfg.heads,
            max_len: cfg.max_len,
        }
    }

    pub fn bind(store: &ParamStore, heads: usize) -> Option<Self> {
        let positions = store.id(&format!("{PREFIX}.pos_emb"))?;
        let mut blocks = Vec::new();
        for l in 0.. {
            let p = format!("{PREFIX}.layer{l}");
            let Some(ln1) = LayerNorm::bind(store, &format!("{p}.ln1")) else {
                break;
            };
            blocks.push(Block {
                ln1,
                qkv: Linear::bind(store, &format!("{p}.qkv"))?,
                out: Linear::bind(store, &format!("{p}.attn_out"))?,
                ln2: LayerNorm::bind(store, &format!("{p}.ln2"))?,
                ff1: Linear::bind(store, &format!("{p}.ff1"))?,
                ff2: Linear::bind(store, &format!("{p}.ff2"))?,
            });
        }
        Some(TransformerEncoder {
            embed: TokenEmbedder::bind(store)?,
            positions,
            blocks,
            final_ln: LayerNorm::bind(store, &format!("{PREFIX}.ln_final"))?,
            heads,
            max_len: store.get(positions).rows(),
        })
    }

    /// One pre-norm block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
    fn block(&self, tape: &mut Tape, b: &Block, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let a = b.ln1.forward(tape, x)?;
        let qkv = b.qkv.forward(tape, a)?;
        let att = tape.attention(qkv, spans, self.heads)?;
        let att = b.out.forward(tape, att)?;
        let x = tape.add(x, att)?;
        let f = b.ln2.forward(tape, x)?;
        let f = b.ff1.forward(tape, f)?;
        let f = tape.relu(f)?;
        let f = b.ff2.forward(tape, f)?;
        tape.add(x, f)
    }

    fn tokens(
        &self,
        tape: &mut Tape,
        seqs: &[&TokenSequence],
        use_places: bool,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        check_seqs(seqs, self.max_len)?;
        let mut x = self.embed.embed(tape, seqs, use_places)?;
        let pos_ids: Vec<usize> = seqs.iter().flat_map(|s| 0..s.ids.len()).collect();
        let pos = tape.param(self.positions);
        let p = tape.gather(pos, &pos_ids)?;
        x = tape.add(x, p)?;
        let mut spans = Vec::with_capacity(seqs.len());
        let mut off = 0;
        for s in seqs {
            spans.push((off, s.ids.len()));
            off += s.ids.len();
        }
        for b in &self.blocks {
            x = self.block(tape, b, x, &spans)?;
        }
        let x = self.final_ln.forward(tape, x)?;
        Ok((x, spans))
    }
}

#[derive(Debug, Clone)]
pub struct RnnEncoder {
    embed: TokenEmbedder,
    forward: Gru,
    backward: Gru,
    proj: Linear,
    max_len: usize,
}

impl RnnEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut RngStream) -> Self {
        RnnEncoder {
            embed: TokenEmbedder::new(store, cfg, rng),
            forward: Gru::new(
                store,
                &format!("{PREFIX}.gru_fwd"),
                cfg.dim,
                cfg.rnn_hidden,
                rng,
            ),
            backward: Gru::new(
                store,
                &format!("{PREFIX}.gru_bwd"),
                cfg.dim,
                cfg.rnn_hidden,
                rng,
            ),
            proj: Linear::new(
                store,
                &format!("{PREFIX}.proj"),
                2 * cfg.rnn_hidden,
                cfg.dim,
                rng,
            ),
            max_len: cfg.max_len,
        }
    }

    pub fn bind(store: &ParamStore, max_len: usize) -> Option<Self> {
        Some(RnnEncoder {
            embed: TokenEmbedder::bind(store)?,
            forward: Gru::bind(store, &format!("{PREFIX}.gru_fwd"))?,
            backward: Gru::bind(store, &format!("{PREFIX}.gru_bwd"))?,
            proj: Linear::bind(store, &format!("{PREFIX}.proj"))?,
            max_len,
        })
    }

    /// Forward and backward states after every token, `[total, H]` each.
    fn states(
        &self,
        tape: &mut Tape,
        seqs: &[&TokenSequence],
        use_places: bool,
    ) -> Result<(Var, Var, Vec<usize>)> {
        check_seqs(seqs, self.max_len)?;
        let x = self.embed.embed(tape, seqs, use_places)?;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.ids.len()).collect();
        let gf = self.forward.project_inputs(tape, x)?;
        let gb = self.backward.project_inputs(tape, x)?;
        let hf = self.forward.run(tape, gf, &lengths, false)?;
        let hb = self.backward.run(tape, gb, &lengths, true)?;
        Ok((hf, hb, lengths))
    }
}

/// Shared description encoder; the output width is `dim` for both kinds.
#[derive(Debug, Clone)]
pub enum TextEncoder {
    Transformer(TransformerEncoder),
    Rnn(RnnEncoder),
}

impl TextEncoder {
    pub fn new(
        kind: EncoderKind,
        store: &mut ParamStore,
        cfg: &TextEncoderConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        match kind {
            EncoderKind::Transformer => Ok(TextEncoder::Transformer(TransformerEncoder::new(
                store, cfg, rng,
            ))),
            EncoderKind::Rnn => Ok(TextEncoder::Rnn(RnnEncoder::new(store, cfg, rng))),
            EncoderKind::CodeEmb => Err(Error::Contract("CodeEmb has no text encoder".into())),
        }
    }

    /// Re-binds to the encoder parameters already in `store`.
    pub fn bind(kind: EncoderKind, store: &ParamStore, cfg: &TextEncoderConfig) -> Result<Self> {
        let found = match kind {
            EncoderKind::Transformer => {
                TransformerEncoder::bind(store, cfg.heads).map(TextEncoder::Transformer)
            }
            EncoderKind::Rnn => RnnEncoder::bind(store, cfg.max_len).map(TextEncoder::Rnn),
            EncoderKind::CodeEmb => None,
        };
        found.ok_or_else(|| Error::Contract(format!("parameter store has no {kind} encoder")))
    }

    /// One vector per sequence: `[seqs, dim]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        seqs: &[&TokenSequence],
        use_places: bool,
    ) -> Result<Var> {
        match self {
            TextEncoder::Transformer(t) => {
                let (x, spans) = t.tokens(tape, seqs, use_places)?;
                let cls: Vec<usize> = spans.iter().map(|s| s.0).collect();
                tape.gather(x, &cls)
            }
            TextEncoder::Rnn(r) => {
                let (hf, hb, lengths) = r.states(tape, seqs, use_places)?;
                let lf = tape.gather(hf, &Gru::final_rows(&lengths, false)?)?;
                let lb = tape.gather(hb, &Gru::final_rows(&lengths, true)?)?;
                let h = tape.concat(&[lf, lb], 1)?;
                r.proj.forward(tape, h)
            }
        }
    }

    /// One vector per token: `[total_tokens, dim]`.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        seqs: &[&TokenSequence],
        use_places: bool,
    ) -> Result<Var> {
        match self {
            TextEncoder::Transformer(t) => Ok(t.tokens(tape, seqs, use_places)?.0),
            TextEncoder::Rnn(r) => {
                let (hf, hb, _) = r.states(tape, seqs, use_places)?;
                let h = tape.concat(&[hf, hb], 1)?;
                r.proj.forward(tape, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::text::{digit_place_indices, DIGIT_BASE};

    fn small_cfg() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 30,
            dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 24,
            rnn_hidden: 8,
            max_len: 12,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            places: digit_place_indices(ids),
        }
    }

    fn d(n: u32) -> u32 {
        DIGIT_BASE + n
    }

    fn encoders(seed: u64) -> Vec<(ParamStore, TextEncoder)> {
        [EncoderKind::Transformer, EncoderKind::Rnn]
            .into_iter()
            .map(|k| {
                let mut rng = RngStream::new(seed);
                let mut store = ParamStore::new();
                let e = TextEncoder::new(k, &mut store, &small_cfg(), &mut rng).unwrap();
                (store, e)
            })
            .collect()
    }

    #[test]
    fn output_widths_match() {
        for (store, enc) in encoders(0) {
            let a = seq(&[1, 20, d(1), d(3)]);
            let b = seq(&[1]);
            let mut tape = Tape::with_params(&store);
            let v = enc.encode(&mut tape, &[&a, &b], true).unwrap();
            assert_eq!(tape.value(v).shape(), &[2, 16]);
            assert!(tape.value(v).all_finite());
            let t = enc.encode_tokens(&mut tape, &[&a, &b], true).unwrap();
            assert_eq!(tape.value(t).shape(), &[5, 16]);
        }
    }

    #[test]
    fn last_digit_changes_output() {
        for (store, enc) in encoders(1) {
            let a = seq(&[1, 20, d(1), d(3), d(5), d(1)]);
            let b = seq(&[1, 20, d(1), d(3), d(5), d(2)]);
            let mut tape = Tape::with_params(&store);
            let v = enc.encode(&mut tape, &[&a, &b, &a], true).unwrap();
            let t = tape.value(v);
            assert_ne!(t.row(0), t.row(1));
            assert_eq!(t.row(0), t.row(2));
        }
    }

    #[test]
    fn batch_composition_does_not_change_vectors() {
        for (store, enc) in encoders(2) {
            let a = seq(&[1, 20, 21, d(7), 15, d(5)]);
            let b = seq(&[1, 22]);
            let mut t1 = Tape::with_params(&store);
            let alone = enc.encode(&mut t1, &[&a], true).unwrap();
            let mut t2 = Tape::with_params(&store);
            let both = enc.encode(&mut t2, &[&b, &a], true).unwrap();
            let diff: f64 = t1
                .value(alone)
                .row(0)
                .iter()
                .zip(t2.value(both).row(1))
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn out_of_range_place_is_contract_error() {
        for (store, enc) in encoders(3) {
            let bad = TokenSequence {
                ids: vec![1, d(1)],
                places: vec![None, Some(PLACE_MAX + 1)],
            };
            let mut tape = Tape::with_params(&store);
            assert!(matches!(
                enc.encode(&mut tape, &[&bad], true),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn rebinding_finds_same_parameters() {
        for (kind, (store, _)) in [EncoderKind::Transformer, EncoderKind::Rnn]
            .into_iter()
            .zip(encoders(4))
        {
            let a = TextEncoder::bind(kind, &store, &small_cfg()).unwrap();
            let s = seq(&[1, 20, d(2)]);
            let mut tape = Tape::with_params(&store);
            let v = a.encode(&mut tape, &[&s], false).unwrap();
            assert!(tape.value(v).all_finite());
        }
    }

    #[test]
    fn encoder_gradients() {
        let a = seq(&[1, 20, d(1), d(3), 15, d(5)]);
        let b = seq(&[1, 22, 23]);
        let c = seq(&[1]);
        for (store, enc) in encoders(5) {
            let mut rng = RngStream::new(9);
            let w = init::normal(&[3, 16], 1.0, &mut rng);
            let err = grad_check(&store, 1e-5, 12, &mut rng, |t| {
                let v = enc.encode(t, &[&a, &b, &c], true)?;
                let wv = t.constant(w.clone());
                let y = t.mul(v, wv)?;
                let y = t.tanh(y)?;
                t.sum(y)
            })
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
