use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Gradient magnitude below which relative error is measured against the floor.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares tape gradients against central finite differences.
///
/// `loss_fn` must build a deterministic scalar loss from the parameters in the
/// tape's store. Up to `coords_per_param` coordinates of every parameter are
/// sampled. Returns the maximum of
/// `|analytic − numeric| / max(|analytic| + |numeric|, GRAD_FLOOR)`. The floor
/// sits above the rounding noise of the difference quotient, so a gradient
/// that is exactly zero (a softmax shift, say) is not reported as a mismatch.
pub fn grad_check<F>(
    store: &ParamStore,
    h: f64,
    coords_per_param: usize,
    rng: &mut RngStream,
    loss_fn: F,
) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?.into_params()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for pid in store.ids().collect::<Vec<ParamId>>() {
        let n = store.get(pid).len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let orig = store.get(pid).data()[c];
            probe.get_mut(pid).data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(pid).data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(pid).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pid.index()].data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init, Tensor};

    #[test]
    fn shift_invariant_parameter_is_not_a_mismatch() {
        // A bias added to every logit of a row leaves the softmax unchanged.
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        let x = store.insert("x", init::normal(&[2, 4], 1.0, &mut rng));
        let shift = store.insert("shift", Tensor::matrix(2, 1, vec![0.3, -0.2]).unwrap());
        let w = init::normal(&[2, 4], 1.0, &mut rng);
        let err = grad_check(&store, 1e-5, 8, &mut rng, |t| {
            let xv = t.param(x);
            let s = t.param(shift);
            let s = t.concat(&[s, s, s, s], 1)?;
            let z = t.add(xv, s)?;
            let p = t.softmax(z)?;
            let wv = t.constant(w.clone());
            let y = t.mul(p, wv)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
