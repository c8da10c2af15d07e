//! Operation tape for reverse-mode differentiation.
//!
//! A tape records one forward pass. Operations are recorded only when at
//! least one input is tracked on this tape; pure computation on untracked
//! tensors allocates no tape state, so the same model code serves both
//! training and prediction. A tape is single-use: `backward` consumes it.
//!
//! The tape is confined to one thread (interior mutability via `RefCell`);
//! concurrent passes use one tape each.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_zip, reduce_to_shape, sigmoid, silu_scalar, softplus_scalar, NodeRef, Tensor,
};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Silu(usize),
    Softplus(usize),
    /// Elementwise x^p for constant p.
    Powf(usize, f64),
    /// x * c for constant c.
    Scale(usize, f64),
    /// x + c for constant c.
    AddConst(usize),
    Matmul(usize, usize),
    /// Sum of all elements, producing a scalar.
    Sum(usize),
    /// Row gather over axis 0: out[i] = in[indices[i]].
    Gather(usize, Arc<Vec<usize>>),
    /// Row concatenation along axis 0.
    Concat(Vec<usize>),
    /// Same data, new shape.
    Reshape(usize),
    /// Mean over rows of -log softmax(logits)[target], numerically stabilized.
    SoftmaxXent(usize, Arc<Vec<usize>>),
    /// Mean over rows of the Shannon entropy of softmax(logits), in nats.
    EntropyMean(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a differentiation target. The returned tensor is tracked and
    /// requires a gradient.
    pub fn param(&self, t: &Tensor) -> Tensor {
        let node = self.push(Op::Leaf, t.shape().to_vec(), t.share_data(), true);
        Tensor::tracked(t.shape().to_vec(), t.share_data(), true, node)
    }

    /// Register a tracked constant (participates in the graph, no gradient).
    pub fn constant(&self, t: &Tensor) -> Tensor {
        let node = self.push(Op::Leaf, t.shape().to_vec(), t.share_data(), false);
        Tensor::tracked(t.shape().to_vec(), t.share_data(), false, node)
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Arc<Vec<f64>>, needs_grad: bool) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        NodeRef {
            tape_id: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Node index for a tensor, registering untracked (or foreign-tape)
    /// tensors as constant leaves.
    fn input_index(&self, t: &Tensor) -> usize {
        match t.node {
            Some(r) if r.tape_id == self.id => r.index,
            _ => {
                self.push(Op::Leaf, t.shape().to_vec(), t.share_data(), false)
                    .index
            }
        }
    }

    fn is_tracked(&self, t: &Tensor) -> bool {
        matches!(t.node, Some(r) if r.tape_id == self.id)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn output(
        &self,
        op_of: impl FnOnce(usize, usize) -> Op,
        a: &Tensor,
        b: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        if !self.is_tracked(a) && !self.is_tracked(b) {
            return Tensor::new(shape, data).expect("op output consistent");
        }
        let ia = self.input_index(a);
        let ib = self.input_index(b);
        let needs = self.needs(ia) || self.needs(ib);
        let data = Arc::new(data);
        let node = self.push(op_of(ia, ib), shape.clone(), Arc::clone(&data), needs);
        Tensor::tracked(shape, data, needs, node)
    }

    fn output_unary(
        &self,
        op_of: impl FnOnce(usize) -> Op,
        a: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        if !self.is_tracked(a) {
            return Tensor::new(shape, data).expect("op output consistent");
        }
        let ia = self.input_index(a);
        let needs = self.needs(ia);
        let data = Arc::new(data);
        let node = self.push(op_of(ia), shape.clone(), Arc::clone(&data), needs);
        Tensor::tracked(shape, data, needs, node)
    }

    // ── Elementwise ops ─────────────────────────────────────────────

    fn binary(
        &self,
        name: &'static str,
        op_of: fn(usize, usize) -> Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape, data) = broadcast_zip(a.shape(), a.data(), b.shape(), b.data(), f)
            .ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        Ok(self.output(op_of, a, b, shape, data))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    fn unary(&self, op_of: impl FnOnce(usize) -> Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.output_unary(op_of, a, a.shape().to_vec(), data)
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&self, a: &Tensor) -> Tensor {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn silu(&self, a: &Tensor) -> Tensor {
        self.unary(Op::Silu, a, silu_scalar)
    }

    pub fn softplus(&self, a: &Tensor) -> Tensor {
        self.unary(Op::Softplus, a, softplus_scalar)
    }

    pub fn powf(&self, a: &Tensor, p: f64) -> Tensor {
        self.unary(|i| Op::Powf(i, p), a, |x| x.powf(p))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(|i| Op::Scale(i, c), a, |x| x * c)
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(Op::AddConst, a, |x| x + c)
    }

    // ── Structural ops ──────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = two_dims(a)?;
        let (k2, n) = two_dims(b)?;
        if k != k2 {
            return Err(Error::InnerDim {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = matmul_data(a.data(), b.data(), m, k, n);
        Ok(self.output(Op::Matmul, a, b, vec![m, n], data))
    }

    pub fn sum(&self, a: &Tensor) -> Tensor {
        let total: f64 = a.data().iter().sum();
        self.output_unary(Op::Sum, a, vec![1], vec![total])
    }

    /// Row gather over axis 0 of a 2-D tensor.
    pub fn gather_rows(&self, a: &Tensor, indices: Arc<Vec<usize>>) -> Result<Tensor> {
        let (rows, cols) = two_dims(a)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "gather index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        let shape = vec![indices.len(), cols];
        Ok(self.output_unary(|i| Op::Gather(i, indices), a, shape, data))
    }

    /// Concatenate 2-D tensors along axis 0.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (_, cols) = two_dims(&parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = two_dims(p)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        let shape = vec![rows, cols];
        if !parts.iter().any(|p| self.is_tracked(p)) {
            return Tensor::new(shape, data);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| self.input_index(p)).collect();
        let needs = idxs.iter().any(|&i| self.needs(i));
        let data = Arc::new(data);
        let node = self.push(Op::Concat(idxs), shape.clone(), Arc::clone(&data), needs);
        Ok(Tensor::tracked(shape, data, needs, node))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::DataLength {
                shape,
                len: a.len(),
            });
        }
        if !self.is_tracked(a) {
            return a.reshaped(shape);
        }
        let ia = self.input_index(a);
        let needs = self.needs(ia);
        let data = a.share_data();
        let node = self.push(Op::Reshape(ia), shape.clone(), Arc::clone(&data), needs);
        Ok(Tensor::tracked(shape, data, needs, node))
    }

    /// x·W (+ b): the building block for projections.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add(&y, bias),
            None => Ok(y),
        }
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean cross-entropy of `logits` [B,C] against integer targets.
    pub fn softmax_xent(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (rows, classes) = two_dims(logits)?;
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy needs at least 2 classes, got {classes}"
            )));
        }
        if targets.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        for &t in targets {
            if t >= classes {
                return Err(Error::TargetOutOfRange { index: t, classes });
            }
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / rows as f64;
        let targets = Arc::new(targets.to_vec());
        Ok(self.output_unary(|i| Op::SoftmaxXent(i, targets), logits, vec![1], vec![loss]))
    }

    /// Mean Shannon entropy (nats) of softmax(`logits`) over rows; the
    /// adaptation objective of entropy-minimization baselines.
    pub fn entropy_mean(&self, logits: &Tensor) -> Result<Tensor> {
        let (rows, classes) = two_dims(logits)?;
        let mut total = 0.0;
        for r in 0..rows {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            total += row_entropy(row);
        }
        let value = total / rows as f64;
        Ok(self.output_unary(Op::EntropyMean, logits, vec![1], vec![value]))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// gradient-requiring leaf reachable from the loss and consumes the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<GradStore> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = match loss.node {
            Some(r) if r.tape_id == self.id => r.index,
            _ => return Err(Error::UntrackedLoss),
        };
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let nodes: &[Node] = &nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue; // keep accumulated leaf gradient in place
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    add_reduced(&mut grads, nodes, *a, &node.shape, &g, |x| x);
                    add_reduced(&mut grads, nodes, *b, &node.shape, &g, |x| x);
                }
                Op::Sub(a, b) => {
                    add_reduced(&mut grads, nodes, *a, &node.shape, &g, |x| x);
                    add_reduced(&mut grads, nodes, *b, &node.shape, &g, |x| -x);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        let (_, prod) = broadcast_zip(
                            &node.shape,
                            &g,
                            &nodes[*b].shape,
                            &nodes[*b].data,
                            |gv, bv| gv * bv,
                        )
                        .expect("recorded op shapes are compatible");
                        let reduced = reduce_to_shape(&prod, &node.shape, &nodes[*a].shape);
                        add_grad(&mut grads, *a, reduced);
                    }
                    if nodes[*b].needs_grad {
                        let (_, prod) = broadcast_zip(
                            &node.shape,
                            &g,
                            &nodes[*a].shape,
                            &nodes[*a].data,
                            |gv, av| gv * av,
                        )
                        .expect("recorded op shapes are compatible");
                        let reduced = reduce_to_shape(&prod, &node.shape, &nodes[*b].shape);
                        add_grad(&mut grads, *b, reduced);
                    }
                }
                Op::Neg(a) => add_mapped(&mut grads, nodes, *a, &g, |k| -g[k]),
                Op::Exp(a) => {
                    let out = &node.data;
                    add_mapped(&mut grads, nodes, *a, &g, |k| g[k] * out[k]);
                }
                Op::Log(a) => {
                    let x = &nodes[*a].data;
                    add_mapped(&mut grads, nodes, *a, &g, |k| g[k] / x[k]);
                }
                Op::Silu(a) => {
                    let x = &nodes[*a].data;
                    add_mapped(&mut grads, nodes, *a, &g, |k| {
                        let s = sigmoid(x[k]);
                        g[k] * s * (1.0 + x[k] * (1.0 - s))
                    });
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].data;
                    add_mapped(&mut grads, nodes, *a, &g, |k| g[k] * sigmoid(x[k]));
                }
                Op::Powf(a, p) => {
                    let x = &nodes[*a].data;
                    let p = *p;
                    add_mapped(&mut grads, nodes, *a, &g, |k| {
                        g[k] * p * x[k].powf(p - 1.0)
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    add_mapped(&mut grads, nodes, *a, &g, |k| g[k] * c);
                }
                Op::AddConst(a) => add_mapped(&mut grads, nodes, *a, &g, |k| g[k]),
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    if nodes[*a].needs_grad {
                        // dA = dC·Bᵀ
                        add_grad(&mut grads, *a, matmul_nt(&g, &nodes[*b].data, m, n, k));
                    }
                    if nodes[*b].needs_grad {
                        // dB = Aᵀ·dC
                        add_grad(&mut grads, *b, matmul_tn(&nodes[*a].data, &g, m, k, n));
                    }
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    if nodes[*a].needs_grad {
                        add_grad(&mut grads, *a, vec![gv; nodes[*a].data.len()]);
                    }
                }
                Op::Gather(a, indices) => {
                    if nodes[*a].needs_grad {
                        let cols = nodes[*a].shape[1];
                        let mut da = vec![0.0; nodes[*a].data.len()];
                        for (row, &src) in indices.iter().enumerate() {
                            for c in 0..cols {
                                da[src * cols + c] += g[row * cols + c];
                            }
                        }
                        add_grad(&mut grads, *a, da);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].data.len();
                        if nodes[p].needs_grad {
                            add_grad(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    if nodes[*a].needs_grad {
                        add_grad(&mut grads, *a, g.clone());
                    }
                }
                Op::SoftmaxXent(a, targets) => {
                    if nodes[*a].needs_grad {
                        let (rows, classes) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                        let logits = &nodes[*a].data;
                        let scale = g[0] / rows as f64;
                        let mut da = vec![0.0; logits.len()];
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &logits[r * classes..(r + 1) * classes];
                            let probs = softmax_row(row);
                            for c in 0..classes {
                                let indicator = if c == t { 1.0 } else { 0.0 };
                                da[r * classes + c] = scale * (probs[c] - indicator);
                            }
                        }
                        add_grad(&mut grads, *a, da);
                    }
                }
                Op::EntropyMean(a) => {
                    if nodes[*a].needs_grad {
                        let (rows, classes) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                        let logits = &nodes[*a].data;
                        let scale = g[0] / rows as f64;
                        let mut da = vec![0.0; logits.len()];
                        for r in 0..rows {
                            let row = &logits[r * classes..(r + 1) * classes];
                            let probs = softmax_row(row);
                            let h = row_entropy(row);
                            for c in 0..classes {
                                // dH/dz_c = -p_c(ln p_c + H)
                                let lp = if probs[c] > 0.0 { probs[c].ln() } else { 0.0 };
                                da[r * classes + c] = scale * (-probs[c] * (lp + h));
                            }
                        }
                        add_grad(&mut grads, *a, da);
                    }
                }
            }
        }

        let mut store = HashMap::new();
        for (i, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if matches!(nodes[i].op, Op::Leaf) && nodes[i].needs_grad {
                    let t = Tensor::new(nodes[i].shape.clone(), g).expect("grad shape");
                    store.insert(i, t);
                }
            }
        }
        Ok(GradStore {
            tape_id: self.id,
            grads: store,
        })
    }
}

/// Gradients for the leaves of one backward pass, keyed by tape node.
pub struct GradStore {
    tape_id: u64,
    grads: HashMap<usize, Tensor>,
}

impl GradStore {
    /// Gradient of the loss with respect to `t`, which must be a `param`
    /// handle from the tape that produced this store.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        match t.node {
            Some(r) if r.tape_id == self.tape_id => self.grads.get(&r.index),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn two_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected 2-D tensor, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn add_grad(grads: &mut [Option<Vec<f64>>], target: usize, delta: Vec<f64>) {
    match &mut grads[target] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), delta.len());
            for (a, d) in acc.iter_mut().zip(delta.iter()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

// Map the upstream gradient through `f`, reduce over broadcast axes, add.
fn add_reduced(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: usize,
    out_shape: &[usize],
    g: &[f64],
    f: impl Fn(f64) -> f64,
) {
    if !nodes[target].needs_grad {
        return;
    }
    let mapped: Vec<f64> = g.iter().map(|&x| f(x)).collect();
    let reduced = reduce_to_shape(&mapped, out_shape, &nodes[target].shape);
    add_grad(grads, target, reduced);
}

// Elementwise chain rule for shape-preserving unary ops.
fn add_mapped(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: usize,
    g: &[f64],
    f: impl Fn(usize) -> f64,
) {
    if !nodes[target].needs_grad {
        return;
    }
    let delta: Vec<f64> = (0..g.len()).map(f).collect();
    add_grad(grads, target, delta);
}

pub(crate) fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

// C[m,n] · B[k,n]ᵀ -> [m,k]
fn matmul_nt(c: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += c[i * n + p] * b[j * n + p];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

// A[m,k]ᵀ · C[m,n] -> [k,n]
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..m {
                acc += a[p * k + i] * c[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

pub(crate) fn row_entropy(row: &[f64]) -> f64 {
    let probs = softmax_row(row);
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
