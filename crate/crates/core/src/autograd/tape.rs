//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is two dimensional. Sequence models lay out a batch
//! of `G` sequences of length `L` as `G·L` consecutive rows, and the fused ops
//! (`attention`, `block_matmul`, `shift_rows`) take the block length explicitly.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Array2<f64>),
    Mul(usize, usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Reshape(usize),
    BlockMatMul(usize, usize, usize),
    BlockMatMulNT(usize, usize, usize),
    ShiftRows {
        x: usize,
        block: usize,
        shift: usize,
    },
    MseWeighted {
        pred: usize,
        target: Array2<f64>,
        weight: Option<Array2<f64>>,
        denom: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recorded for backpropagation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

const GELU_K: f64 = 1.702;

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf referring to a stored parameter. Frozen parameters act as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::MatMulNT(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    /// Broadcast a `1 × n` row over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(bias), (1, n), "bias shape mismatch");
        let value = kernels::add_bias(self.value(x), self.value(bias));
        let ng = self.ng(x.0) || self.ng(bias.0);
        self.push(value, Op::AddBias(x.0, bias.0), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let ng = self.ng(x.0);
        self.push(value, Op::Scale(x.0, c), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, m: Array2<f64>) -> Var {
        assert_eq!(self.shape(x), m.dim(), "mul_const shape mismatch");
        let value = self.value(x) * &m;
        let ng = self.ng(x.0);
        self.push(value, Op::MulConst(x.0, m), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    /// GELU in its sigmoid form, `x·σ(1.702x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(GELU_K * v));
        let ng = self.ng(x.0);
        self.push(value, Op::Gelu(x.0), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let ng = self.ng(x.0);
        self.push(value, Op::Sigmoid(x.0), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.ng(x.0);
        self.push(value, Op::Tanh(x.0), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let out = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        self.push(
            out.y,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: out.xhat,
                rstd: out.rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.outer_iter_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let ng = self.ng(x.0);
        self.push(value, Op::SoftmaxRows(x.0), ng)
    }

    /// Multi-head scaled dot-product attention, bidirectional within each
    /// block of `seq_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert!(seq_len > 0 && rows % seq_len == 0, "rows not a multiple of seq_len");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), seq_len, heads);
        let ng = self.ng(q.0) || self.ng(k.0) || self.ng(v.0);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq_len,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &idx);
        let ng = self.ng(x.0);
        self.push(value, Op::GatherRows(x.0, idx), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows width mismatch");
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::ConcatRows(a.0, b.0), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols height mismatch");
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::ConcatCols(a.0, b.0), ng)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape size mismatch");
        let value = to_standard(xv).into_shape_with_order((rows, cols)).expect("contiguous");
        let ng = self.ng(x.0);
        self.push(value, Op::Reshape(x.0), ng)
    }

    /// Per block of `block` rows: `a_g · x_g` where `a_g` is `block × block`.
    pub fn block_matmul(&mut self, a: Var, x: Var, block: usize) -> Var {
        let (ar, ac) = self.shape(a);
        let (xr, xc) = self.shape(x);
        assert_eq!(ac, block);
        assert_eq!(ar, xr);
        assert!(block > 0 && ar % block == 0);
        let (av, xv) = (self.value(a), self.value(x));
        let mut out = Array2::zeros((xr, xc));
        for g in 0..ar / block {
            let r = g * block..(g + 1) * block;
            out.slice_mut(s![r.clone(), ..])
                .assign(&av.slice(s![r.clone(), ..]).dot(&xv.slice(s![r, ..])));
        }
        let ng = self.ng(a.0) || self.ng(x.0);
        self.push(out, Op::BlockMatMul(a.0, x.0, block), ng)
    }

    /// Per block of `block` rows: `q_g · k_gᵀ`, giving `block` columns.
    pub fn block_matmul_nt(&mut self, q: Var, k: Var, block: usize) -> Var {
        let (qr, qc) = self.shape(q);
        assert_eq!(self.shape(k), (qr, qc));
        assert!(block > 0 && qr % block == 0);
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = Array2::zeros((qr, block));
        for g in 0..qr / block {
            let r = g * block..(g + 1) * block;
            out.slice_mut(s![r.clone(), ..])
                .assign(&qv.slice(s![r.clone(), ..]).dot(&kv.slice(s![r, ..]).t()));
        }
        let ng = self.ng(q.0) || self.ng(k.0);
        self.push(out, Op::BlockMatMulNT(q.0, k.0, block), ng)
    }

    /// Delay rows by `shift` positions inside each block, zero-filling the start.
    pub fn shift_rows(&mut self, x: Var, block: usize, shift: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(block > 0 && rows % block == 0);
        let mut out = Array2::zeros((rows, cols));
        if shift < block {
            for g in 0..rows / block {
                let base = g * block;
                out.slice_mut(s![base + shift..base + block, ..])
                    .assign(&xv.slice(s![base..base + block - shift, ..]));
            }
        }
        let ng = self.ng(x.0);
        self.push(out, Op::ShiftRows { x: x.0, block, shift }, ng)
    }

    /// `Σ w (pred − target)² / Σ w`, or the plain mean when `weight` is `None`.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>, weight: Option<Array2<f64>>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape mismatch");
        let (sum, denom) = match &weight {
            Some(w) => {
                assert_eq!(w.dim(), target.dim());
                let mut sum = 0.0;
                Zip::from(pv).and(&target).and(w).for_each(|&p, &t, &w| {
                    sum += w * (p - t) * (p - t);
                });
                (sum, w.sum())
            }
            None => {
                let sum = Zip::from(pv)
                    .and(&target)
                    .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
                (sum, target.len() as f64)
            }
        };
        assert!(denom > 0.0, "mse over an empty support");
        let value = Array2::from_elem((1, 1), sum / denom);
        let ng = self.ng(pred.0);
        self.push(
            value,
            Op::MseWeighted {
                pred: pred.0,
                target,
                weight,
                denom,
            },
            ng,
        )
    }

    /// Backpropagate from a `1 × 1` output and collect parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out: Vec<Option<Array2<f64>>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |idx: usize, delta: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[idx].needs_grad {
                    return;
                }
                match &mut grads[idx] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        acc(*a, g.dot(&bv.t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, av.t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        acc(*a, g.dot(bv.as_ref()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, g.t().dot(av.as_ref()), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        acc(*b, kernels::column_sums(&g), &mut grads);
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Scale(x, c) => acc(*x, g * *c, &mut grads),
                Op::MulConst(x, m) => acc(*x, g * m, &mut grads),
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        acc(*a, &g * bv.as_ref(), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &g * av.as_ref(), &mut grads);
                    }
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut d = g;
                    Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &v| {
                        let s = sigmoid(GELU_K * v);
                        *d *= s + GELU_K * v * s * (1.0 - s);
                    });
                    acc(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(node.value.as_ref())
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*x, d, &mut grads);
                }
                Op::Tanh(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(node.value.as_ref())
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*x, d, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (dx, dgamma, dbeta) = kernels::layer_norm_backward(&g, xhat, rstd, &self.nodes[*gamma].value);
                    acc(*beta, dbeta, &mut grads);
                    acc(*gamma, dgamma, &mut grads);
                    acc(*x, dx, &mut grads);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref();
                    let mut d = g;
                    for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = drow.dot(&yrow);
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        probs,
                        *seq_len,
                        *heads,
                    );
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                    acc(*v, dv, &mut grads);
                }
                Op::GatherRows(x, idx) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.nrows();
                    if self.ng(*b) {
                        acc(*b, g.slice(s![ra.., ..]).to_owned(), &mut grads);
                    }
                    acc(*a, g.slice(s![..ra, ..]).to_owned(), &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    if self.ng(*b) {
                        acc(*b, g.slice(s![.., ca..]).to_owned(), &mut grads);
                    }
                    acc(*a, g.slice(s![.., ..ca]).to_owned(), &mut grads);
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[*x].value.dim();
                    acc(
                        *x,
                        to_standard(&g).into_shape_with_order(dim).expect("contiguous"),
                        &mut grads,
                    );
                }
                Op::BlockMatMul(a, x, block) => {
                    let (av, xv) = (&self.nodes[*a].value, &self.nodes[*x].value);
                    let mut da = Array2::zeros(av.dim());
                    let mut dx = Array2::zeros(xv.dim());
                    for gi in 0..av.nrows() / block {
                        let r = gi * block..(gi + 1) * block;
                        let gb = g.slice(s![r.clone(), ..]);
                        da.slice_mut(s![r.clone(), ..])
                            .assign(&gb.dot(&xv.slice(s![r.clone(), ..]).t()));
                        dx.slice_mut(s![r.clone(), ..])
                            .assign(&av.slice(s![r, ..]).t().dot(&gb));
                    }
                    acc(*a, da, &mut grads);
                    acc(*x, dx, &mut grads);
                }
                Op::BlockMatMulNT(q, k, block) => {
                    let (qv, kv) = (&self.nodes[*q].value, &self.nodes[*k].value);
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    for gi in 0..qv.nrows() / block {
                        let r = gi * block..(gi + 1) * block;
                        let gb = g.slice(s![r.clone(), ..]);
                        dq.slice_mut(s![r.clone(), ..])
                            .assign(&gb.dot(&kv.slice(s![r.clone(), ..])));
                        dk.slice_mut(s![r.clone(), ..])
                            .assign(&gb.t().dot(&qv.slice(s![r, ..])));
                    }
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                }
                Op::ShiftRows { x, block, shift } => {
                    let (rows, cols) = g.dim();
                    let mut dx = Array2::zeros((rows, cols));
                    if shift < block {
                        for gi in 0..rows / block {
                            let base = gi * block;
                            dx.slice_mut(s![base..base + block - shift, ..])
                                .assign(&g.slice(s![base + shift..base + block, ..]));
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::MseWeighted {
                    pred,
                    target,
                    weight,
                    denom,
                } => {
                    let pv = &self.nodes[*pred].value;
                    let c = 2.0 * g[[0, 0]] / denom;
                    let mut d = pv.as_ref() - target;
                    d.mapv_inplace(|x| x * c);
                    if let Some(w) = weight {
                        d *= w;
                    }
                    acc(*pred, d, &mut grads);
                }
            }
        }
        Gradients::from_vec(out)
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

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn to_standard(x: &Array2<f64>) -> Array2<f64> {
    if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    }
}
