//! Reverse-mode autodiff over a growing tape of tensor ops.
//!
//! A [`Tape`] records every operation; [`Var`] is a cheap handle into it.
//! Calling [`Var::backward`] on a scalar output walks the tape once in
//! reverse and accumulates gradients for every node that (transitively)
//! depends on a gradient-carrying leaf. A tape is single-use: build, run
//! backward once, read gradients, drop.
//!
//! Shape mismatches, mixing vars from different tapes, and running backward
//! twice are caller bugs and panic rather than returning errors.

use super::tensor::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// Broadcasts a 1xC row over every row of the left operand.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, Real),
    Sin(usize),
    Relu(usize),
    LeakyRelu(usize, Real),
    Elu(usize),
    Transpose(usize),
    /// Same elements, new shape; the gradient is reshaped back.
    Reshape(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<Vec<usize>>),
    SoftmaxRows(usize),
    /// Overwrites entries where the mask is true with a constant; the fill
    /// value itself does not matter for the gradient.
    MaskedFill(usize, Rc<Vec<bool>>),
    /// Elementwise product with a constant tensor (dropout keep-mask etc.).
    MulElemConst(usize, Rc<Vec<Real>>),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: Real,
    },
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
        active: Rc<Vec<bool>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

/// Shared recording tape. Clones are handles to the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// Gradient-carrying input (model parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant: no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Stacks parts vertically. All parts must share a column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let inner = self.inner.borrow();
        let cols = inner.nodes[parts[0].id].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert!(
                Rc::ptr_eq(&self.inner, &p.tape.inner),
                "concat_rows mixes vars from different tapes"
            );
            let t = &inner.nodes[p.id].value;
            assert_eq!(
                t.cols(),
                cols,
                "concat_rows column mismatch: {:?} vs {} cols",
                t.shape(),
                cols
            );
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let requires = parts
            .iter()
            .any(|p| inner.nodes[p.id].requires_grad);
        drop(inner);
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            requires,
        )
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by tape op (shape {:?})",
            value.shape()
        );
        let mut inner = self.inner.borrow_mut();
        assert!(
            !inner.backward_done,
            "tape already ran backward; build a fresh tape"
        );
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }
}

impl Var {
    pub fn shape(&self) -> [usize; 2] {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Gradient accumulated by the last `backward` run; zeros if this node
    /// was not reached.
    pub fn grad(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        assert!(inner.backward_done, "grad() before backward()");
        let shape = inner.nodes[self.id].value.shape();
        inner.grads[self.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "op mixes vars from different tapes"
        );
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let (out, requires) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.push(out, op, requires)
    }

    fn binary(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        self.same_tape(other);
        let (out, requires) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            (f(&a.value, &b.value), a.requires_grad || b.requires_grad)
        };
        self.tape.push(out, op, requires)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.matmul(b), Op::Matmul(self.id, other.id))
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    /// Adds a 1xC row vector to every row.
    pub fn add_row(&self, row: &Var) -> Var {
        self.binary(
            row,
            |a, r| {
                assert_eq!(
                    (r.rows(), r.cols()),
                    (1, a.cols()),
                    "add_row shape mismatch: {:?} + {:?}",
                    a.shape(),
                    r.shape()
                );
                let mut out = a.clone();
                let c = a.cols();
                for i in 0..a.rows() {
                    for j in 0..c {
                        out[(i, j)] += r.data()[j];
                    }
                }
                out
            },
            Op::AddRow(self.id, row.id),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: Real) -> Var {
        self.unary(|a| a.map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn sin(&self) -> Var {
        self.unary(|a| a.map(Real::sin), Op::Sin(self.id))
    }

    pub fn relu(&self) -> Var {
        self.unary(|a| a.map(|x| if x > 0.0 { x } else { 0.0 }), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: Real) -> Var {
        self.unary(
            |a| a.map(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn elu(&self) -> Var {
        self.unary(
            |a| a.map(|x| if x > 0.0 { x } else { x.exp() - 1.0 }),
            Op::Elu(self.id),
        )
    }

    pub fn transpose(&self) -> Var {
        self.unary(|a| a.transpose(), Op::Transpose(self.id))
    }

    /// Reinterprets the value as `rows x cols` without reordering elements.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        self.unary(
            |a| {
                assert_eq!(
                    a.len(),
                    rows * cols,
                    "reshape of {:?} to [{rows}, {cols}] changes the element count",
                    a.shape()
                );
                Tensor::new(rows, cols, a.data().to_vec())
            },
            Op::Reshape(self.id),
        )
    }

    /// Concatenates along columns: [n x a] ++ [n x b] -> [n x a+b].
    pub fn concat_cols(&self, other: &Var) -> Var {
        self.binary(
            other,
            |a, b| {
                assert_eq!(
                    a.rows(),
                    b.rows(),
                    "concat_cols row mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
                let mut data = Vec::with_capacity(n * (ca + cb));
                for i in 0..n {
                    data.extend_from_slice(a.row_slice(i));
                    data.extend_from_slice(b.row_slice(i));
                }
                Tensor::new(n, ca + cb, data)
            },
            Op::ConcatCols(self.id, other.id),
        )
    }

    /// Picks rows by index (repeats allowed). Gradient scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let idx = Rc::new(idx.to_vec());
        self.unary(
            |a| {
                let c = a.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    assert!(i < a.rows(), "gather_rows index {i} out of {} rows", a.rows());
                    data.extend_from_slice(a.row_slice(i));
                }
                Tensor::new(idx.len(), c, data)
            },
            Op::GatherRows(self.id, idx.clone()),
        )
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Var {
        self.unary(
            |a| {
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let row = &mut out.data_mut()[i * a.cols()..(i + 1) * a.cols()];
                    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                out
            },
            Op::SoftmaxRows(self.id),
        )
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get
    /// zero gradient. The mask is row-major over the full tensor.
    pub fn masked_fill(&self, mask: &Rc<Vec<bool>>, fill: Real) -> Var {
        self.unary(
            |a| {
                assert_eq!(
                    mask.len(),
                    a.len(),
                    "masked_fill mask length {} vs tensor {:?}",
                    mask.len(),
                    a.shape()
                );
                let mut out = a.clone();
                for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *v = fill;
                    }
                }
                out
            },
            Op::MaskedFill(self.id, mask.clone()),
        )
    }

    /// Elementwise product with a constant tensor of identical layout.
    pub fn mul_elem_const(&self, weights: &Rc<Vec<Real>>) -> Var {
        self.unary(
            |a| {
                assert_eq!(
                    weights.len(),
                    a.len(),
                    "mul_elem_const length {} vs tensor {:?}",
                    weights.len(),
                    a.shape()
                );
                let mut out = a.clone();
                for (v, &w) in out.data_mut().iter_mut().zip(weights.iter()) {
                    *v *= w;
                }
                out
            },
            Op::MulElemConst(self.id, weights.clone()),
        )
    }

    /// Inverted-scaling dropout: at `p == 0` this is the identity; otherwise
    /// kept entries are scaled by `1/(1-p)` so the expectation is unchanged.
    pub fn dropout(&self, p: Real, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        if p == 0.0 {
            return self.clone();
        }
        let n = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].value.len()
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..n)
            .map(|_| if rng.gen::<f64>() < p as f64 { 0.0 } else { keep })
            .collect();
        self.mul_elem_const(&Rc::new(mask))
    }

    pub fn sum(&self) -> Var {
        self.unary(
            |a| Tensor::scalar(a.data().iter().sum()),
            Op::Sum(self.id),
        )
    }

    pub fn mean(&self) -> Var {
        self.unary(
            |a| {
                assert!(!a.is_empty(), "mean of empty tensor");
                Tensor::scalar(a.data().iter().sum::<Real>() / a.len() as Real)
            },
            Op::Mean(self.id),
        )
    }

    /// Per-row layer normalization with learned gain/bias rows.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: Real) -> Var {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (out, requires) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let g = &inner.nodes[gamma.id].value;
            let b = &inner.nodes[beta.id].value;
            assert_eq!(
                (g.rows(), g.cols(), b.rows(), b.cols()),
                (1, x.cols(), 1, x.cols()),
                "layer_norm gain/bias must be 1x{} rows, got {:?} and {:?}",
                x.cols(),
                g.shape(),
                b.shape()
            );
            let mut out = x.clone();
            let c = x.cols();
            for i in 0..x.rows() {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let mu = row.iter().sum::<Real>() / c as Real;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / c as Real;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g.data()[j] * ((*v - mu) * inv) + b.data()[j];
                }
            }
            let req = inner.nodes[self.id].requires_grad
                || inner.nodes[gamma.id].requires_grad
                || inner.nodes[beta.id].requires_grad;
            (out, req)
        };
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            requires,
        )
    }

    /// Mean cross-entropy of row logits against class indices, restricted to
    /// rows where `active` is true. Uses a stable log-sum-exp.
    pub fn cross_entropy(&self, targets: &[usize], active: &[bool]) -> Var {
        let targets = Rc::new(targets.to_vec());
        let active = Rc::new(active.to_vec());
        self.unary(
            |a| {
                assert_eq!(
                    targets.len(),
                    a.rows(),
                    "cross_entropy targets {} vs {} rows",
                    targets.len(),
                    a.rows()
                );
                assert_eq!(active.len(), a.rows(), "cross_entropy active-mask length mismatch");
                let n_active = active.iter().filter(|&&x| x).count();
                assert!(n_active > 0, "cross_entropy with no active rows");
                let mut total = 0.0;
                for i in 0..a.rows() {
                    if !active[i] {
                        continue;
                    }
                    let t = targets[i];
                    assert!(t < a.cols(), "cross_entropy target {t} out of {} classes", a.cols());
                    let row = a.row_slice(i);
                    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<Real>().ln();
                    total += lse - row[t];
                }
                Tensor::scalar(total / n_active as Real)
            },
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.clone(),
                active: active.clone(),
            },
        )
    }

    /// Reverse sweep from a scalar output. Panics on non-scalar shapes and on
    /// a second call for the same tape.
    pub fn backward(&self) {
        let mut inner = self.tape.inner.borrow_mut();
        assert!(
            !inner.backward_done,
            "backward called twice on the same tape"
        );
        assert_eq!(
            inner.nodes[self.id].value.shape(),
            [1, 1],
            "backward needs a scalar output, got {:?}",
            inner.nodes[self.id].value.shape()
        );
        inner.backward_done = true;
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[self.id] = Some(Tensor::scalar(1.0));

        for id in (0..=self.id).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = inner.grads[id].take() else { continue };
            backprop_node(&mut inner, id, &g);
            inner.grads[id] = Some(g);
        }
    }
}

/// Adds `delta` into the gradient slot of `id` if that node wants gradients.
fn accumulate(inner: &mut TapeInner, id: usize, delta: Tensor) {
    if !inner.nodes[id].requires_grad {
        return;
    }
    match &mut inner.grads[id] {
        Some(g) => {
            assert_eq!(
                g.shape(),
                delta.shape(),
                "gradient shape mismatch: {:?} vs {:?}",
                g.shape(),
                delta.shape()
            );
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node(inner: &mut TapeInner, id: usize, g: &Tensor) {
    // Cheap value reads clone the operand tensors involved in this node's
    // backward rule; tensors are small at desk scale.
    let value = |inner: &TapeInner, i: usize| inner.nodes[i].value.clone();
    match &inner.nodes[id].op {
        Op::Leaf => {}
        &Op::Matmul(a, b) => {
            let (va, vb) = (value(inner, a), value(inner, b));
            accumulate(inner, a, g.matmul(&vb.transpose()));
            accumulate(inner, b, va.transpose().matmul(g));
        }
        &Op::Add(a, b) => {
            accumulate(inner, a, g.clone());
            accumulate(inner, b, g.clone());
        }
        &Op::AddRow(a, row) => {
            accumulate(inner, a, g.clone());
            let mut dr = Tensor::zeros(1, g.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    dr[(0, j)] += g[(i, j)];
                }
            }
            accumulate(inner, row, dr);
        }
        &Op::Sub(a, b) => {
            accumulate(inner, a, g.clone());
            accumulate(inner, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (value(inner, a), value(inner, b));
            accumulate(inner, a, g.zip_map(&vb, |x, y| x * y));
            accumulate(inner, b, g.zip_map(&va, |x, y| x * y));
        }
        &Op::Scale(a, c) => accumulate(inner, a, g.map(|x| x * c)),
        &Op::Sin(a) => {
            let va = value(inner, a);
            accumulate(inner, a, g.zip_map(&va, |gi, x| gi * x.cos()));
        }
        &Op::Relu(a) => {
            let va = value(inner, a);
            accumulate(inner, a, g.zip_map(&va, |gi, x| if x > 0.0 { gi } else { 0.0 }));
        }
        &Op::LeakyRelu(a, s) => {
            let va = value(inner, a);
            accumulate(inner, a, g.zip_map(&va, |gi, x| if x > 0.0 { gi } else { s * gi }));
        }
        &Op::Elu(a) => {
            let va = value(inner, a);
            accumulate(inner, a, g.zip_map(&va, |gi, x| if x > 0.0 { gi } else { gi * x.exp() }));
        }
        &Op::Transpose(a) => accumulate(inner, a, g.transpose()),
        &Op::Reshape(a) => {
            let [rows, cols] = inner.nodes[a].value.shape();
            accumulate(inner, a, Tensor::new(rows, cols, g.data().to_vec()));
        }
        &Op::ConcatCols(a, b) => {
            let (ca, cb) = (inner.nodes[a].value.cols(), inner.nodes[b].value.cols());
            let n = g.rows();
            let (mut da, mut db) = (Tensor::zeros(n, ca), Tensor::zeros(n, cb));
            for i in 0..n {
                for j in 0..ca {
                    da[(i, j)] = g[(i, j)];
                }
                for j in 0..cb {
                    db[(i, j)] = g[(i, ca + j)];
                }
            }
            accumulate(inner, a, da);
            accumulate(inner, b, db);
        }
        Op::ConcatRows(parts) => {
            let parts = parts.clone();
            let mut offset = 0;
            for p in parts {
                let r = inner.nodes[p].value.rows();
                let c = g.cols();
                let mut dp = Tensor::zeros(r, c);
                dp.data_mut()
                    .copy_from_slice(&g.data()[offset * c..(offset + r) * c]);
                offset += r;
                accumulate(inner, p, dp);
            }
        }
        Op::GatherRows(a, idx) => {
            let (a, idx) = (*a, idx.clone());
            let src_shape = inner.nodes[a].value.shape();
            let mut da = Tensor::zeros(src_shape[0], src_shape[1]);
            for (out_row, &src_row) in idx.iter().enumerate() {
                for j in 0..g.cols() {
                    da[(src_row, j)] += g[(out_row, j)];
                }
            }
            accumulate(inner, a, da);
        }
        &Op::SoftmaxRows(a) => {
            let y = value(inner, id);
            let mut da = Tensor::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let dot: Real = (0..g.cols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                for j in 0..g.cols() {
                    da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                }
            }
            accumulate(inner, a, da);
        }
        Op::MaskedFill(a, mask) => {
            let (a, mask) = (*a, mask.clone());
            let mut da = g.clone();
            for (v, &m) in da.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *v = 0.0;
                }
            }
            accumulate(inner, a, da);
        }
        Op::MulElemConst(a, w) => {
            let (a, w) = (*a, w.clone());
            let mut da = g.clone();
            for (v, &wi) in da.data_mut().iter_mut().zip(w.iter()) {
                *v *= wi;
            }
            accumulate(inner, a, da);
        }
        &Op::Sum(a) => {
            let shape = inner.nodes[a].value.shape();
            accumulate(inner, a, Tensor::full(shape[0], shape[1], g.item()));
        }
        &Op::Mean(a) => {
            let shape = inner.nodes[a].value.shape();
            let n = (shape[0] * shape[1]) as Real;
            accumulate(inner, a, Tensor::full(shape[0], shape[1], g.item() / n));
        }
        &Op::LayerNorm { x, gamma, beta, eps } => {
            let vx = value(inner, x);
            let vg = value(inner, gamma);
            let c = vx.cols();
            let cf = c as Real;
            let mut dx = Tensor::zeros(vx.rows(), c);
            let mut dgamma = Tensor::zeros(1, c);
            let mut dbeta = Tensor::zeros(1, c);
            for i in 0..vx.rows() {
                let row = vx.row_slice(i);
                let mu = row.iter().sum::<Real>() / cf;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / cf;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<Real> = row.iter().map(|v| (v - mu) * inv).collect();
                let dy = g.row_slice(i);
                let dxhat: Vec<Real> = (0..c).map(|j| dy[j] * vg.data()[j]).collect();
                let mean_dxhat = dxhat.iter().sum::<Real>() / cf;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<Real>() / cf;
                for j in 0..c {
                    dx[(i, j)] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    dgamma[(0, j)] += dy[j] * xhat[j];
                    dbeta[(0, j)] += dy[j];
                }
            }
            accumulate(inner, x, dx);
            accumulate(inner, gamma, dgamma);
            accumulate(inner, beta, dbeta);
        }
        Op::CrossEntropy {
            logits,
            targets,
            active,
        } => {
            let (logits, targets, active) = (*logits, targets.clone(), active.clone());
            let vl = value(inner, logits);
            let n_active = active.iter().filter(|&&x| x).count() as Real;
            let upstream = g.item();
            let mut dl = Tensor::zeros(vl.rows(), vl.cols());
            for i in 0..vl.rows() {
                if !active[i] {
                    continue;
                }
                let row = vl.row_slice(i);
                let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let sum: Real = row.iter().map(|&v| (v - m).exp()).sum();
                for j in 0..vl.cols() {
                    let p = (row[j] - m).exp() / sum;
                    let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                    dl[(i, j)] = upstream * (p - onehot) / n_active;
                }
            }
            accumulate(inner, logits, dl);
        }
    }
}

/// Affine map helper: `x W + b` with `b` broadcast over rows.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    x.matmul(w).add_row(b)
}

/// Clones the next entry of an externally supplied leaf list and advances the
/// cursor. Model structs use this to rebind themselves to leaves created by a
/// finite-difference harness in `params()` order.
pub fn take_var(vars: &[Var], at: &mut usize) -> Var {
    let v = vars[*at].clone();
    *at += 1;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<Real>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        // d/dx sum(x*x) = 2x; at x = 3 the gradient is 6
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).sum();
        y.backward();
        assert_eq!(x.grad().item(), 6.0);
    }

    #[test]
    fn zero_path_contributes_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = x.mul(&zero).sum();
        y.backward();
        assert_eq!(x.grad().item(), 0.0);
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // y = sum(A B); dA = 1 * B^T broadcast, dB = A^T * 1
        let tape = Tape::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(t(&[vec![5.0], vec![6.0]]));
        let y = a.matmul(&b).sum();
        y.backward();
        assert_eq!(a.grad(), t(&[vec![5.0, 6.0], vec![5.0, 6.0]]));
        assert_eq!(b.grad(), t(&[vec![4.0], vec![6.0]]));
    }

    #[test]
    fn softmax_uniform_logits() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 0.0, 0.0]]));
        let y = x.softmax_rows().value();
        for j in 0..3 {
            assert!((y[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1000.0, 0.0]]));
        let y = x.softmax_rows().value();
        assert!(y.all_finite());
        assert!((y[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(y[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let y = x.softmax_rows().value();
        let z: Real = [1.0, 2.0, 3.0f64].iter().map(|v| (*v as Real).exp()).sum();
        for (j, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((y[(0, j)] - (*v as Real).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_class_count() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 4));
        let loss = x.cross_entropy(&[2], &[true]).value().item();
        assert!((loss - (4.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![50.0, 0.0, 0.0]]));
        let loss = x.cross_entropy(&[0], &[true]).value().item();
        assert!(loss < 1e-9, "loss {loss} not near zero");
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let tape = Tape::new();
        let logits = vec![0.3, -1.2, 2.0];
        let x = tape.constant(t(&[logits.clone()]));
        let loss = x.cross_entropy(&[1], &[true]).value().item();
        let z: Real = logits.iter().map(|v| v.exp()).sum();
        let expect = z.ln() - logits[1];
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![9.0, 0.0], vec![0.0, 0.0]]));
        // first row masked out: loss is the uniform row only
        let loss = x.cross_entropy(&[1, 0], &[false, true]).value().item();
        assert!((loss - (2.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0]]));
        let mask = Rc::new(vec![true, false]);
        let y = x.masked_fill(&mask, -1e30).sum();
        y.backward();
        assert_eq!(x.grad(), t(&[vec![0.0, 1.0]]));
    }

    #[test]
    fn gather_rows_scatter_adds_gradient() {
        let tape = Tape::new();
        let table = tape.leaf(t(&[vec![1.0, 1.0], vec![2.0, 2.0]]));
        // row 0 gathered twice: its gradient doubles
        let y = table.gather_rows(&[0, 0, 1]).sum();
        y.backward();
        assert_eq!(table.grad(), t(&[vec![2.0, 2.0], vec![1.0, 1.0]]));
    }

    #[test]
    fn reshape_routes_gradient_back_to_original_shape() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let flat = x.reshape(6, 1);
        assert_eq!(flat.value(), Tensor::new(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // weight each flattened entry differently so routing is visible
        let w = tape.constant(Tensor::new(6, 1, vec![1.0, 10.0, 100.0, 0.5, 0.25, 0.125]));
        flat.mul(&w).sum().backward();
        assert_eq!(x.grad(), t(&[vec![1.0, 10.0, 100.0], vec![0.5, 0.25, 0.125]]));
    }

    #[test]
    #[should_panic(expected = "changes the element count")]
    fn reshape_element_count_mismatch_panics() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0]]));
        x.reshape(3, 1);
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn backward_twice_panics() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = x.mul(&x).sum();
        y.backward();
        y.backward();
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let _ = a.matmul(&b);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        use rand::SeedableRng;
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(1, 1000, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = x.dropout(0.5, &mut rng).value();
        for &v in y.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        // empirical keep rate should be near one half
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!((400..600).contains(&kept), "kept {kept} of 1000");
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let gamma = tape.constant(Tensor::full(1, 4, 1.0));
        let beta = tape.constant(Tensor::zeros(1, 4));
        let y = x.layer_norm(&gamma, &beta, 1e-5).value();
        let mean: Real = y.data().iter().sum::<Real>() / 4.0;
        let var: Real = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
