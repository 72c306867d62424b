//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs, so node order is a topological order by construction. Inputs
//! are always rank-2 views (`rows × cols`); binary elementwise ops broadcast a
//! dimension of size one.

use super::array::{gemm, Tensor};
use super::fused::{self, StepPlan};
use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        input: Var,
        ids: Vec<usize>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    GruSeq {
        gx: Var,
        wh: Var,
        bh: Var,
        plan: StepPlan,
        aux: Vec<f64>,
    },
    Attention {
        qkv: Var,
        spans: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

/// A single-threaded recording of one forward pass.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// Tape without trainable parameters.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value"
            )));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant or differentiable leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            value.reshape(vec![r, c]).expect("same size")
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Node for a stored parameter; registered once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        let id = store
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let r = bdim(ra, rb);
        let c = bdim(ca, cb);
        match (r, c) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::dim(op, format!("[{ra}, {ca}] vs [{rb}, {cb}]"))),
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca, rb, cb) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(r * c);
        if ra == rb && ca == cb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ia = if ra == 1 { 0 } else { i };
                let ib = if rb == 1 { 0 } else { i };
                for j in 0..c {
                    let x = da[ia * ca + if ca == 1 { 0 } else { j }];
                    let y = db[ib * cb + if cb == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::matrix(r, c, out)?, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, k), rg, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.requires_grad(a);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need ≥1 input and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = inputs.iter().map(|&v| self.dims(v)).collect();
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::dim("concat", format!("row concat of {dims:?}")));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(r * c);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::matrix(r, c, data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::dim("concat", format!("column concat of {dims:?}")));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::matrix(r, c, data)?
        };
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Rows or columns `start..end` of `a`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(Error::dim(
                "slice",
                format!("[{r}, {c}] axis {axis} range {start}..{end}"),
            ));
        }
        let t = self.value(a);
        let out = if axis == 0 {
            Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..end]);
            }
            Tensor::matrix(r, w, data)?
        };
        let rg = self.requires_grad(a);
        self.push(
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
            "slice",
        )
    }

    /// Row gather; with a parameter table this is an embedding lookup.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "embedding_lookup",
                format!("id {bad} out of range for {r} rows"),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        let rg = self.requires_grad(table);
        self.push(
            out,
            Op::Gather {
                input: table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding_lookup",
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.requires_grad(a);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(out, Op::LayerNorm { input: a, inv_std }, rg, "layer_norm")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Inverted dropout; exact identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Dropout { input: a, mask }, rg, "dropout")
    }

    /// Mean binary cross-entropy of probabilities against targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let t = self.value(pred);
        if t.rows() != target.rows() || t.cols() != target.cols() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{:?} vs {:?}", t.shape(), target.shape()),
            ));
        }
        let n = t.len().max(1) as f64;
        let loss = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.requires_grad(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Bce { pred, target },
            rg,
            "binary_cross_entropy",
        )
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        if r != targets.len() || targets.iter().any(|&k| k >= c) || r == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("[{r}, {c}] logits vs {} targets", targets.len()),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &k) in probs.chunks_mut(c).zip(targets) {
            softmax_in_place(row);
            loss -= row[k].max(f64::MIN_POSITIVE).ln();
        }
        loss /= r as f64;
        let probs = Tensor::matrix(r, c, probs)?;
        let rg = self.requires_grad(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Gated recurrent unit over packed sequences.
    ///
    /// `gx` holds the input-side gate pre-activations (`[rows, 3H]`, gate
    /// order `r, z, n`) of sequences stored back to back with the given
    /// `lengths`; `w_hidden` is `[H, 3H]` and `b_hidden` `[1, 3H]`. Every
    /// sequence starts from a zero state. Row `i` of the `[rows, H]` result is
    /// the state right after consuming row `i`, so a sequence's final state
    /// sits at its last row (or first row when `reverse`).
    pub fn gru_sequence(
        &mut self,
        gx: Var,
        w_hidden: Var,
        b_hidden: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let (rows, c) = self.dims(gx);
        let (hd, c2) = self.dims(w_hidden);
        let (br, bc) = self.dims(b_hidden);
        if c != 3 * hd || c2 != 3 * hd || br != 1 || bc != 3 * hd {
            return Err(Error::dim(
                "gru_sequence",
                format!("gx [{rows}, {c}], w_hidden [{hd}, {c2}], b_hidden [{br}, {bc}]"),
            ));
        }
        if lengths.iter().sum::<usize>() != rows {
            return Err(Error::dim(
                "gru_sequence",
                format!(
                    "lengths sum to {} but gx has {rows} rows",
                    lengths.iter().sum::<usize>()
                ),
            ));
        }
        let plan = StepPlan::new(lengths, reverse);
        let (out, aux) = fused::gru_forward(
            self.value(gx).data(),
            self.value(w_hidden).data(),
            self.value(b_hidden).data(),
            hd,
            &plan,
        );
        let rg =
            self.requires_grad(gx) || self.requires_grad(w_hidden) || self.requires_grad(b_hidden);
        self.push(
            Tensor::matrix(rows, hd, out)?,
            Op::GruSeq {
                gx,
                wh: w_hidden,
                bh: b_hidden,
                plan,
                aux,
            },
            rg,
            "gru_sequence",
        )
    }

    /// Multi-head self-attention restricted to each `(offset, len)` span of
    /// rows. `qkv` is `[rows, 3D]` with blocks `q | k | v`; returns `[rows, D]`.
    pub fn attention(&mut self, qkv: Var, spans: &[(usize, usize)], heads: usize) -> Result<Var> {
        let (rows, c) = self.dims(qkv);
        if heads == 0 || c % (3 * heads) != 0 {
            return Err(Error::dim(
                "attention",
                format!("[{rows}, {c}] with {heads} heads"),
            ));
        }
        if let Some(&(o, l)) = spans.iter().find(|&&(o, l)| o + l > rows || l == 0) {
            return Err(Error::dim(
                "attention",
                format!("span {o}+{l} outside {rows} rows"),
            ));
        }
        let d = c / 3;
        let (out, probs) = fused::attention_forward(self.value(qkv).data(), d, spans, heads);
        let rg = self.requires_grad(qkv);
        self.push(
            Tensor::matrix(rows, d, out)?,
            Op::Attention {
                qkv,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, &g, &mut grads);
            // only leaf gradients are kept; intermediates are freed as we go
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut params = Vec::new();
        if let Some(store) = self.store {
            for (pid, slot) in self.param_vars.iter().enumerate() {
                let g = slot.and_then(|v| grads[v.0].take());
                params.push(g.unwrap_or_else(|| Tensor::zeros(store.get(ParamId(pid)).shape())));
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        &mut da,
                    );
                    accumulate(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        &mut db,
                    );
                    accumulate(grads, *b, Tensor::matrix(k, n, db).unwrap());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let d = reduce_to(g, self.dims(*a));
                    accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let mut d = reduce_to(g, self.dims(*b));
                    if sign < 0.0 {
                        d.data_mut().iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(grads, *b, d);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let prod = broadcast_mul(g, self.value(*b));
                    accumulate(grads, *a, reduce_to(&prod, self.dims(*a)));
                }
                if self.requires_grad(*b) {
                    let prod = broadcast_mul(g, self.value(*a));
                    accumulate(grads, *b, reduce_to(&prod, self.dims(*b)));
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = self.dims(v);
                    if self.requires_grad(v) {
                        let part = if *axis == 0 {
                            let gc = g.cols();
                            Tensor::matrix(r, c, g.data()[offset * gc..(offset + r) * gc].to_vec())
                                .unwrap()
                        } else {
                            let mut data = Vec::with_capacity(r * c);
                            for row in 0..r {
                                data.extend_from_slice(&g.row(row)[offset..offset + c]);
                            }
                            Tensor::matrix(r, c, data).unwrap()
                        };
                        accumulate(grads, v, part);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                let (r, c) = self.dims(*input);
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(&[r, c]));
                let d = slot.data_mut();
                if *axis == 0 {
                    for (x, y) in d[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                } else {
                    let w = g.cols();
                    for row in 0..r {
                        let dst = &mut d[row * c + start..row * c + start + w];
                        for (x, y) in dst.iter_mut().zip(g.row(row)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gather { input, ids } => {
                let (r, c) = self.dims(*input);
                let slot = grads[input.0].get_or_insert_with(|| Tensor::zeros(&[r, c]));
                let d = slot.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for (x, y) in d[id * c..(id + 1) * c].iter_mut().zip(g.row(row)) {
                        *x += y;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, out, |gy, y| gy * y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gy, y| gy * (1.0 - y * y));
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, out, |gy, y| if y > 0.0 { gy } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm { input, inv_std } => {
                let c = out.cols();
                let n = c as f64;
                let mut d = Vec::with_capacity(out.len());
                for ((gr, yr), is) in g.data().chunks(c).zip(out.data().chunks(c)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / n;
                    d.extend(gr.iter().zip(yr).map(|(x, y)| is * (x - mg - y * mgy)));
                }
                accumulate(grads, *input, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, Tensor::full(&[r, c], g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.dims(*a);
                accumulate(grads, *a, Tensor::full(&[r, c], g.item() / (r * c) as f64));
            }
            Op::Dropout { input, mask } => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                accumulate(grads, *input, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                let n = p.len().max(1) as f64;
                let gy = g.item();
                let d = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gy * (p - y) / (p * (1.0 - p)) / n
                    })
                    .collect();
                accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let r = probs.rows();
                let c = probs.cols();
                let scale = g.item() / r as f64;
                let mut d = probs.data().to_vec();
                for (row, &k) in d.chunks_mut(c).zip(targets) {
                    row[k] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(grads, *logits, Tensor::matrix(r, c, d).unwrap());
            }
            Op::GruSeq {
                gx,
                wh,
                bh,
                plan,
                aux,
            } => {
                let (hd, _) = self.dims(*wh);
                let gg = fused::gru_backward(
                    g.data(),
                    out.data(),
                    aux,
                    self.value(*wh).data(),
                    hd,
                    plan,
                );
                let rows = out.rows();
                if self.requires_grad(*gx) {
                    accumulate(grads, *gx, Tensor::matrix(rows, 3 * hd, gg.gx).unwrap());
                }
                if self.requires_grad(*wh) {
                    accumulate(grads, *wh, Tensor::matrix(hd, 3 * hd, gg.wh).unwrap());
                }
                if self.requires_grad(*bh) {
                    accumulate(grads, *bh, Tensor::matrix(1, 3 * hd, gg.bh).unwrap());
                }
            }
            Op::Attention {
                qkv,
                spans,
                heads,
                probs,
            } => {
                let t = self.value(*qkv);
                let d = t.cols() / 3;
                let dq = fused::attention_backward(g.data(), t.data(), probs, d, spans, *heads);
                accumulate(grads, *qkv, Tensor::matrix(t.rows(), 3 * d, dq).unwrap());
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of a parameter; zeros when it did not influence the loss.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Gradient of a leaf node that required one.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in store order.
    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn bdim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = g
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(y.shape().to_vec(), d).unwrap()
}

/// `g * x` with `x` broadcast to `g`'s shape.
fn broadcast_mul(g: &Tensor, x: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let (rx, cx) = (x.rows(), x.cols());
    if rx == r && cx == c {
        return zip_map(g, &x.clone().reshape(vec![r, c]).unwrap(), |a, b| a * b);
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ix = if rx == 1 { 0 } else { i };
        for j in 0..c {
            let jx = if cx == 1 { 0 } else { j };
            out.push(g.data()[i * c + j] * x.data()[ix * cx + jx]);
        }
    }
    Tensor::matrix(r, c, out).unwrap()
}

/// Sums `g` over the dimensions that were broadcast to reach it.
fn reduce_to(g: &Tensor, (r, c): (usize, usize)) -> Tensor {
    let (gr, gc) = (g.rows(), g.cols());
    if gr == r && gc == c {
        return g.clone().reshape(vec![r, c]).unwrap();
    }
    let mut out = vec![0.0; r * c];
    for i in 0..gr {
        let ii = if r == 1 { 0 } else { i };
        for j in 0..gc {
            let jj = if c == 1 { 0 } else { j };
            out[ii * c + jj] += g.data()[i * gc + j];
        }
    }
    Tensor::matrix(r, c, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0]]));
        let b = t.constant(m(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[5.0, 5.0, 5.0]]));
        let y = t.softmax(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.var(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(0.0));
        let mut t = Tape::with_params(&store);
        let wv = t.param(w);
        let y = t.sigmoid(wv).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(w).item(), 0.25);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(2.0));
        let b = store.insert("b", Tensor::zeros(&[2, 2]));
        let mut t = Tape::with_params(&store);
        let av = t.param(a);
        let y = t.mul(av, av).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(a).item(), 4.0);
        assert_eq!(g.param(b).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 2]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut t = Tape::new();
        let mut rng = RngStream::new(0);
        let x = t.constant(m(&[&[1.0, -2.0, 3.0]]));
        let y = t.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut t = Tape::new();
        let mut rng = RngStream::new(0);
        let x = t.constant(Tensor::full(&[1, 1000], 1.0));
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        for &v in t.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(t.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn broadcast_add_bias_and_column() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let b = t.leaf(m(&[&[10.0, 20.0]]), true);
        let col = t.leaf(m(&[&[1.0], &[0.0]]), true);
        let y = t.add(x, b).unwrap();
        let z = t.mul(y, col).unwrap();
        assert_eq!(t.value(z).data(), &[11.0, 22.0, 0.0, 0.0]);
        let s = t.sum(z).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.var(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.var(col).unwrap().data(), &[33.0, 37.0]);
    }

    #[test]
    fn layer_norm_rows_centered() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 7.0], &[-3.0, 0.5, 100.0]]));
        let y = t.layer_norm(x).unwrap();
        for row in t.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4, 10]));
        let l = t.cross_entropy(x, &[0, 3, 9, 2]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::scalar(0.5));
        let l = t.binary_cross_entropy(p, Tensor::scalar(1.0)).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
