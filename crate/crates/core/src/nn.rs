//! Layers composed from tape primitives.

use crate::error::{Error, Result};
use crate::tensor::{init, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialization.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            init::uniform(&[in_dim, out_dim], bound, rng),
        );
        let bias = store.insert(
            format!("{name}.bias"),
            init::uniform(&[1, out_dim], bound, rng),
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            init::normal(&[in_dim, out_dim], std, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let shape = store.get(weight).shape();
        Some(Linear {
            weight,
            bias,
            in_dim: shape[0],
            out_dim: shape[1],
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Learned gain and shift after row normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Option<Self> {
        Some(LayerNorm {
            gain: store.id(&format!("{name}.gain"))?,
            shift: store.id(&format!("{name}.shift"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        let y = tape.mul(n, g)?;
        tape.add(y, s)
    }
}

/// Single-layer gated recurrent unit (`r`, `z`, `n` gate layout).
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Gru {
            w_input: store.insert(
                format!("{name}.w_input"),
                init::uniform(&[in_dim, 3 * hidden], bound, rng),
            ),
            b_input: store.insert(
                format!("{name}.b_input"),
                init::uniform(&[1, 3 * hidden], bound, rng),
            ),
            w_hidden: store.insert(
                format!("{name}.w_hidden"),
                init::uniform(&[hidden, 3 * hidden], bound, rng),
            ),
            b_hidden: store.insert(
                format!("{name}.b_hidden"),
                init::uniform(&[1, 3 * hidden], bound, rng),
            ),
            hidden,
        }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Option<Self> {
        let w_hidden = store.id(&format!("{name}.w_hidden"))?;
        Some(Gru {
            w_input: store.id(&format!("{name}.w_input"))?,
            b_input: store.id(&format!("{name}.b_input"))?,
            w_hidden,
            b_hidden: store.id(&format!("{name}.b_hidden"))?,
            hidden: store.get(w_hidden).shape()[0],
        })
    }

    /// Input-side gate pre-activations for all rows at once: `x W + b`.
    pub fn project_inputs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w_input);
        let b = tape.param(self.b_input);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// One step from projected inputs `gx` (`[n, 3H]`) and state `h` (`[n, H]`).
    pub fn cell(&self, tape: &mut Tape, gx: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let wh = tape.param(self.w_hidden);
        let bh = tape.param(self.b_hidden);
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add(gh, bh)?;
        let gx_rz = tape.slice(gx, 1, 0, 2 * hd)?;
        let gh_rz = tape.slice(gh, 1, 0, 2 * hd)?;
        let rz = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.slice(rz, 1, 0, hd)?;
        let z = tape.slice(rz, 1, hd, 2 * hd)?;
        let gx_n = tape.slice(gx, 1, 2 * hd, 3 * hd)?;
        let gh_n = tape.slice(gh, 1, 2 * hd, 3 * hd)?;
        let rn = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, rn)?;
        let n = tape.tanh(n)?;
        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Runs over packed sequences from zero state, returning the state after
    /// every row (see [`Tape::gru_sequence`]).
    pub fn run(&self, tape: &mut Tape, gx: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let wh = tape.param(self.w_hidden);
        let bh = tape.param(self.b_hidden);
        tape.gru_sequence(gx, wh, bh, lengths, reverse)
    }

    /// Row holding each sequence's final state in the output of [`run`](Self::run).
    pub fn final_rows(lengths: &[usize], reverse: bool) -> Result<Vec<usize>> {
        let mut rows = Vec::with_capacity(lengths.len());
        let mut off = 0;
        for &l in lengths {
            if l == 0 {
                return Err(Error::Input("recurrent input sequence is empty".into()));
            }
            rows.push(if reverse { off } else { off + l - 1 });
            off += l;
        }
        Ok(rows)
    }

    /// Final state per sequence: `[num_seqs, H]`.
    pub fn run_final(
        &self,
        tape: &mut Tape,
        gx: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let rows = Self::final_rows(lengths, reverse)?;
        let all = self.run(tape, gx, lengths, reverse)?;
        tape.gather(all, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn composed_final(
        gru: &Gru,
        store: &ParamStore,
        x: &Tensor,
        off: usize,
        len: usize,
        reverse: bool,
    ) -> Vec<f64> {
        let mut t = Tape::with_params(store);
        let mut rows: Vec<Vec<f64>> = (off..off + len).map(|r| x.row(r).to_vec()).collect();
        if reverse {
            rows.reverse();
        }
        let xs = t.constant(Tensor::from_rows(&rows).unwrap());
        let gx = gru.project_inputs(&mut t, xs).unwrap();
        let mut h = t.constant(Tensor::zeros(&[1, gru.hidden]));
        for i in 0..len {
            let xi = t.slice(gx, 0, i, i + 1).unwrap();
            h = gru.cell(&mut t, xi, h).unwrap();
        }
        t.value(h).data().to_vec()
    }

    #[test]
    fn packed_run_matches_step_by_step_cells() {
        let mut rng = RngStream::new(5);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 3, 4, &mut rng);
        let lengths = [3usize, 1, 5];
        let x = init::normal(&[9, 3], 1.0, &mut rng);
        for reverse in [false, true] {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone());
            let gx = gru.project_inputs(&mut tape, xv).unwrap();
            let last = gru.run_final(&mut tape, gx, &lengths, reverse).unwrap();
            let batched = tape.value(last).clone();
            let mut off = 0;
            for (s, &len) in lengths.iter().enumerate() {
                let single = composed_final(&gru, &store, &x, off, len, reverse);
                for (a, b) in single.iter().zip(batched.row(s)) {
                    assert!((a - b).abs() < 1e-12);
                }
                off += len;
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(Gru::final_rows(&[2, 0], false).is_err());
    }

    #[test]
    fn packed_gru_gradients() {
        let mut rng = RngStream::new(4);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 3, 8, &mut rng);
        let x = init::normal(&[10, 3], 1.0, &mut rng);
        let w = init::normal(&[10, 8], 1.0, &mut rng);
        let lengths = [4usize, 1, 5];
        for reverse in [false, true] {
            let err = grad_check(&store, 1e-5, 25, &mut rng, |t| {
                let xv = t.constant(x.clone());
                let gx = gru.project_inputs(t, xv)?;
                let all = gru.run(t, gx, &lengths, reverse)?;
                let wv = t.constant(w.clone());
                let y = t.mul(all, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn gru_cell_gradients() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 5, 8, &mut rng);
        let x = init::normal(&[3, 5], 1.0, &mut rng);
        let h0 = init::normal(&[3, 8], 0.5, &mut rng);
        let w = init::normal(&[3, 8], 1.0, &mut rng);
        let err = grad_check(&store, 1e-5, 20, &mut rng, |t| {
            let xv = t.constant(x.clone());
            let hv = t.constant(h0.clone());
            let gx = gru.project_inputs(t, xv)?;
            let h = gru.cell(t, gx, hv)?;
            let h = gru.cell(t, gx, h)?;
            let wv = t.constant(w.clone());
            let y = t.mul(h, wv)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_and_layer_norm_gradients() {
        let mut rng = RngStream::new(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 6, &mut rng);
        let ln = LayerNorm::new(&mut store, "n", 6);
        store.insert("n.gain", init::normal(&[1, 6], 1.0, &mut rng));
        let x = init::normal(&[5, 4], 1.0, &mut rng);
        let w = init::normal(&[5, 6], 1.0, &mut rng);
        let err = grad_check(&store, 1e-5, 30, &mut rng, |t| {
            let xv = t.constant(x.clone());
            let y = lin.forward(t, xv)?;
            let y = ln.forward(t, y)?;
            let y = t.tanh(y)?;
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
