use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
            second: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` are in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.len() != store.get(id).len() {
                return Err(Error::dim(
                    "adam_step",
                    format!(
                        "{}: gradient {:?} vs {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    ),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    store.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
