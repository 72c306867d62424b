//! Kernels for the multi-step tape ops: a packed GRU recurrence and packed
//! multi-head self-attention. Both work on sequences stored back to back as
//! rows of one matrix, so no padding is ever materialized.

use super::array::gemm;
use super::tape::sigmoid;

/// Step schedule for running a recurrence over packed sequences.
///
/// Sequences are visited longest first, so the sequences still running at step
/// `t` always form a prefix of that order.
#[derive(Debug, Clone)]
pub(crate) struct StepPlan {
    /// `steps[t]` lists the packed rows consumed at step `t`.
    pub steps: Vec<Vec<usize>>,
    pub reverse: bool,
}

impl StepPlan {
    pub fn new(lengths: &[usize], reverse: bool) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in lengths {
            offsets.push(acc);
            acc += l;
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
        let max = lengths.iter().copied().max().unwrap_or(0);
        let steps = (0..max)
            .map(|t| {
                order
                    .iter()
                    .take_while(|&&s| lengths[s] > t)
                    .map(|&s| {
                        if reverse {
                            offsets[s] + lengths[s] - 1 - t
                        } else {
                            offsets[s] + t
                        }
                    })
                    .collect()
            })
            .collect();
        StepPlan { steps, reverse }
    }

    fn prev(&self, row: usize) -> usize {
        if self.reverse {
            row + 1
        } else {
            row - 1
        }
    }
}

/// Forward recurrence. `gx` holds input projections `[rows, 3H]` in `r, z, n`
/// gate order. Returns the state after every row and the saved activations
/// `[rows, 4H]` (`r`, `z`, `n`, hidden-side `n` pre-activation).
pub(crate) fn gru_forward(
    gx: &[f64],
    wh: &[f64],
    bh: &[f64],
    hd: usize,
    plan: &StepPlan,
) -> (Vec<f64>, Vec<f64>) {
    let rows = gx.len() / (3 * hd);
    let mut out = vec![0.0; rows * hd];
    let mut aux = vec![0.0; rows * 4 * hd];
    let mut hprev = Vec::new();
    let mut gh = Vec::new();
    for (t, step) in plan.steps.iter().enumerate() {
        let n = step.len();
        hprev.clear();
        if t == 0 {
            hprev.resize(n * hd, 0.0);
        } else {
            for &row in step {
                let p = plan.prev(row);
                hprev.extend_from_slice(&out[p * hd..(p + 1) * hd]);
            }
        }
        gh.clear();
        for _ in 0..n {
            gh.extend_from_slice(bh);
        }
        gemm(n, hd, 3 * hd, 1.0, &hprev, false, wh, false, &mut gh);
        for (i, &row) in step.iter().enumerate() {
            let x = &gx[row * 3 * hd..(row + 1) * 3 * hd];
            let g = &gh[i * 3 * hd..(i + 1) * 3 * hd];
            let hp = &hprev[i * hd..(i + 1) * hd];
            let a = &mut aux[row * 4 * hd..(row + 1) * 4 * hd];
            let o = &mut out[row * hd..(row + 1) * hd];
            for j in 0..hd {
                let r = sigmoid(x[j] + g[j]);
                let z = sigmoid(x[hd + j] + g[hd + j]);
                let ghn = g[2 * hd + j];
                let nn = (x[2 * hd + j] + r * ghn).tanh();
                o[j] = nn + z * (hp[j] - nn);
                a[j] = r;
                a[hd + j] = z;
                a[2 * hd + j] = nn;
                a[3 * hd + j] = ghn;
            }
        }
    }
    (out, aux)
}

pub(crate) struct GruGrads {
    pub gx: Vec<f64>,
    pub wh: Vec<f64>,
    pub bh: Vec<f64>,
}

/// Reverse pass of [`gru_forward`] given the gradient of every output row.
pub(crate) fn gru_backward(
    g_out: &[f64],
    out: &[f64],
    aux: &[f64],
    wh: &[f64],
    hd: usize,
    plan: &StepPlan,
) -> GruGrads {
    let rows = out.len() / hd;
    let mut dout = g_out.to_vec();
    let mut dgx = vec![0.0; rows * 3 * hd];
    let mut dwh = vec![0.0; hd * 3 * hd];
    let mut dbh = vec![0.0; 3 * hd];
    let mut hprev = Vec::new();
    let mut dgh = Vec::new();
    let mut dh = Vec::new();
    for (t, step) in plan.steps.iter().enumerate().rev() {
        let n = step.len();
        hprev.clear();
        if t == 0 {
            hprev.resize(n * hd, 0.0);
        } else {
            for &row in step {
                let p = plan.prev(row);
                hprev.extend_from_slice(&out[p * hd..(p + 1) * hd]);
            }
        }
        dgh.clear();
        dgh.resize(n * 3 * hd, 0.0);
        for (i, &row) in step.iter().enumerate() {
            let g = &dout[row * hd..(row + 1) * hd];
            let a = &aux[row * 4 * hd..(row + 1) * 4 * hd];
            let hp = &hprev[i * hd..(i + 1) * hd];
            let dx = &mut dgx[row * 3 * hd..(row + 1) * 3 * hd];
            let dg = &mut dgh[i * 3 * hd..(i + 1) * 3 * hd];
            for j in 0..hd {
                let (r, z, nn, ghn) = (a[j], a[hd + j], a[2 * hd + j], a[3 * hd + j]);
                let dz = g[j] * (hp[j] - nn);
                let dan = g[j] * (1.0 - z) * (1.0 - nn * nn);
                let dar = dan * ghn * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                dx[j] = dar;
                dx[hd + j] = daz;
                dx[2 * hd + j] = dan;
                dg[j] = dar;
                dg[hd + j] = daz;
                dg[2 * hd + j] = dan * r;
            }
        }
        gemm(hd, n, 3 * hd, 1.0, &hprev, true, &dgh, false, &mut dwh);
        for row in dgh.chunks(3 * hd) {
            for (b, d) in dbh.iter_mut().zip(row) {
                *b += d;
            }
        }
        if t > 0 {
            dh.clear();
            dh.resize(n * hd, 0.0);
            gemm(n, 3 * hd, hd, 1.0, &dgh, false, wh, true, &mut dh);
            for (i, &row) in step.iter().enumerate() {
                let p = plan.prev(row);
                let z = &aux[row * 4 * hd + hd..row * 4 * hd + 2 * hd];
                for j in 0..hd {
                    let direct = dout[row * hd + j] * z[j];
                    dout[p * hd + j] += dh[i * hd + j] + direct;
                }
            }
        }
    }
    GruGrads {
        gx: dgx,
        wh: dwh,
        bh: dbh,
    }
}

/// Copies head `h` of the `part`-th block (`0 = q, 1 = k, 2 = v`) for the rows
/// `off..off + len` into a contiguous `[len, dh]` buffer.
fn head_block(
    qkv: &[f64],
    d: usize,
    off: usize,
    len: usize,
    part: usize,
    h: usize,
    dh: usize,
) -> Vec<f64> {
    let mut buf = Vec::with_capacity(len * dh);
    for r in off..off + len {
        let base = r * 3 * d + part * d + h * dh;
        buf.extend_from_slice(&qkv[base..base + dh]);
    }
    buf
}

fn scatter_block(dst: &mut [f64], width: usize, col: usize, off: usize, src: &[f64], dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        let base = (off + i) * width + col;
        for (x, y) in dst[base..base + dh].iter_mut().zip(chunk) {
            *x += y;
        }
    }
}

/// Scaled dot-product self-attention within each span of `qkv` rows
/// (`[rows, 3D]`, blocks `q | k | v`). Returns the `[rows, D]` output and the
/// attention weights of every span and head.
pub(crate) fn attention_forward(
    qkv: &[f64],
    d: usize,
    spans: &[(usize, usize)],
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let rows = qkv.len() / (3 * d);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = Vec::with_capacity(spans.len() * heads);
    for &(off, len) in spans {
        for h in 0..heads {
            let q = head_block(qkv, d, off, len, 0, h, dh);
            let k = head_block(qkv, d, off, len, 1, h, dh);
            let v = head_block(qkv, d, off, len, 2, h, dh);
            let mut s = vec![0.0; len * len];
            gemm(len, dh, len, scale, &q, false, &k, true, &mut s);
            for row in s.chunks_mut(len.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
            let mut o = vec![0.0; len * dh];
            gemm(len, len, dh, 1.0, &s, false, &v, false, &mut o);
            scatter_block(&mut out, d, h * dh, off, &o, dh);
            probs.push(s);
        }
    }
    (out, probs)
}

/// Reverse pass of [`attention_forward`]; returns the gradient for `qkv`.
pub(crate) fn attention_backward(
    g_out: &[f64],
    qkv: &[f64],
    probs: &[Vec<f64>],
    d: usize,
    spans: &[(usize, usize)],
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    let mut p_iter = probs.iter();
    for &(off, len) in spans {
        for h in 0..heads {
            let p = p_iter.next().expect("one weight matrix per span and head");
            let q = head_block(qkv, d, off, len, 0, h, dh);
            let k = head_block(qkv, d, off, len, 1, h, dh);
            let v = head_block(qkv, d, off, len, 2, h, dh);
            let mut go = Vec::with_capacity(len * dh);
            for r in off..off + len {
                go.extend_from_slice(&g_out[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            let mut dv = vec![0.0; len * dh];
            gemm(len, len, dh, 1.0, p, true, &go, false, &mut dv);
            let mut dp = vec![0.0; len * len];
            gemm(len, dh, len, 1.0, &go, false, &v, true, &mut dp);
            for (dr, pr) in dp.chunks_mut(len.max(1)).zip(p.chunks(len.max(1))) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, y) in dr.iter_mut().zip(pr) {
                    *x = y * (*x - dot);
                }
            }
            let mut dq = vec![0.0; len * dh];
            gemm(len, len, dh, scale, &dp, false, &k, false, &mut dq);
            let mut dk = vec![0.0; len * dh];
            gemm(len, len, dh, scale, &dp, true, &q, false, &mut dk);
            scatter_block(&mut dqkv, 3 * d, h * dh, off, &dq, dh);
            scatter_block(&mut dqkv, 3 * d, d + h * dh, off, &dk, dh);
            scatter_block(&mut dqkv, 3 * d, 2 * d + h * dh, off, &dv, dh);
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_orders_longest_first() {
        let p = StepPlan::new(&[2, 4, 1], false);
        assert_eq!(p.steps, vec![vec![2, 0, 6], vec![3, 1], vec![4], vec![5]]);
        let r = StepPlan::new(&[2, 4, 1], true);
        assert_eq!(r.steps, vec![vec![5, 1, 6], vec![4, 0], vec![3], vec![2]]);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // with v = 1 everywhere, every output coordinate is 1
        let d = 4;
        let mut qkv = vec![0.0; 3 * 3 * d];
        for r in 0..3 {
            for j in 0..d {
                qkv[r * 3 * d + j] = (r * d + j) as f64 * 0.1;
                qkv[r * 3 * d + d + j] = (j as f64) - 1.0;
                qkv[r * 3 * d + 2 * d + j] = 1.0;
            }
        }
        let (out, probs) = attention_forward(&qkv, d, &[(0, 2), (2, 1)], 2);
        assert!(out.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert_eq!(probs.len(), 4);
        assert_eq!(probs[2], vec![1.0]);
    }
}
