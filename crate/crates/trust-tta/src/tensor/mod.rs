//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! Tensors are immutable values: every operation produces a fresh tensor and
//! the underlying buffer is shared via `Arc`, so clones are cheap and tensors
//! can cross threads freely. Differentiation is handled by [`Tape`]: a tensor
//! participates in gradient computation only while it carries a node handle
//! for the tape that recorded it.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, FdReport};
pub use tape::{GradStore, Tape};

pub(crate) use tape::{row_entropy, softmax_row};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle of a recorded value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// Dense n-dimensional array of f64 values.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("filled: consistent by construction")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument("ragged row lengths".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value for `[row, col]` of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Detached copy: same values, no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Same buffer viewed under a new shape (detached).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        })
    }

    pub(crate) fn tracked(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        node: NodeRef,
    ) -> Self {
        Tensor {
            shape,
            data,
            requires_grad,
            node: Some(node),
        }
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// Shape produced by numpy-style broadcasting; `None` when incompatible.
/// Shorter shapes are left-padded with extents of 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = dim_at(a, i, nd);
        let db = dim_at(b, i, nd);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_at(shape: &[usize], i: usize, nd: usize) -> usize {
    let pad = nd - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Row-major strides, with 0 for extents that broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let pad = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over broadcast inputs.
pub(crate) fn broadcast_zip(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Option<(Vec<usize>, Vec<f64>)> {
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Some((out_shape, data));
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(a[oa], b[ob]));
        // advance the multi-index, rightmost dimension fastest
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Some((out_shape, data))
}

/// Sum `grad` (of shape `from`) down to shape `to` by reducing the axes that
/// were broadcast. Inverse of broadcasting for gradient flow.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let nd = from.len();
    let pad = nd - to.len();
    let mut padded = vec![1usize; nd];
    padded[pad..].copy_from_slice(to);

    let target_numel: usize = to.iter().product();
    let mut out = vec![0.0; target_numel];
    let st = broadcast_strides(&padded, from);
    let mut idx = vec![0usize; nd];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln(1 + e^x) with a linear branch above 20 to avoid overflow.
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}
