use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::text::{ValueStrategy, VcValue};

pub const VALUE_DIM: usize = 64;

/// Two-layer value network for the separate value path: `(z, present) → 64 → 64`.
#[derive(Debug, Clone)]
pub struct ValueMlp {
    l1: Linear,
    l2: Linear,
}

impl ValueMlp {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream) -> Self {
        ValueMlp {
            l1: Linear::new(store, "value_mlp.l1", 2, VALUE_DIM, rng),
            l2: Linear::new(store, "value_mlp.l2", VALUE_DIM, VALUE_DIM, rng),
        }
    }

    pub fn bind(store: &ParamStore) -> Option<Self> {
        Some(ValueMlp {
            l1: Linear::bind(store, "value_mlp.l1")?,
            l2: Linear::bind(store, "value_mlp.l2")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, values: &[VcValue]) -> Result<Var> {
        let data = values
            .iter()
            .flat_map(|v| [v.z, if v.present { 1.0 } else { 0.0 }])
            .collect();
        let x = tape.constant(Tensor::matrix(values.len(), 2, data)?);
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, h)?;
        tape.tanh(h)
    }
}

/// Attaches the value path to event vectors. Text-side strategies already carry
/// the value, so only `Vc` changes the vector (`dim + 64` columns).
pub fn fuse_value(
    tape: &mut Tape,
    events: Var,
    values: &[VcValue],
    strategy: ValueStrategy,
    mlp: Option<&ValueMlp>,
) -> Result<Var> {
    if strategy != ValueStrategy::Vc {
        return Ok(events);
    }
    let mlp =
        mlp.ok_or_else(|| Error::Config("value strategy vc needs the value network".into()))?;
    let v = mlp.forward(tape, values)?;
    tape.concat(&[events, v], 1)
}
