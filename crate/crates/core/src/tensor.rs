//! Dense row-major tensors and a reverse-mode tape over a small, closed
//! set of primitives.
//!
//! The tape is append-only: every op pushes one node whose inputs were
//! pushed earlier, so node order is already a topological order and
//! [`Tape::backward`] simply walks it in reverse.
//!
//! ```
//! use voxelgat::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().with_grad());
//! let y = tape.leaky_relu(x, 0.2);
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.2, 1.0]);
//! ```

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Work threshold (multiply-adds) above which matmul rows run on rayon.
const PAR_MATMUL_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension("grad length differs from data".into()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns of a rank-2 tensor. Rank-1 tensors are treated as
    /// a column.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [r] => Ok((*r, 1)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, row-major.
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    };
    let work = m * k * n;
    if work >= PAR_MATMUL_WORK && rayon::current_num_threads() > 1 {
        // Blocks of rows sized to roughly PAR_MATMUL_WORK multiply-adds each.
        let rows = (PAR_MATMUL_WORK / (k * n).max(1)).clamp(1, m);
        out.par_chunks_mut(rows * n).enumerate().for_each(|(b, block)| {
            for (r, crow) in block.chunks_mut(n).enumerate() {
                row((b * rows + r, crow));
            }
        });
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Plain matrix product outside of any tape.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions {m}x{k} · {k2}x{n}"
        )));
    }
    Tensor::new(vec![m, n], matmul_kernel(&a.data, &b.data, m, k, n))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    LeakyRelu(Var, T),
    SegmentSoftmax {
        input: Var,
        groups: Arc<[usize]>,
        n_groups: usize,
    },
    GatherRows {
        input: Var,
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        input: Var,
        index: Arc<[usize]>,
    },
    ScaleRows(Var, Var),
    WeightedScatter {
        values: Var,
        weights: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    },
    Log {
        input: Var,
        floor: T,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    log_clamps: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            log_clamps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log` inputs that fell below their floor.
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It participates in backward iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node's value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grad(v).map(<[T]>::to_vec);
        t
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                x.shape, y.shape
            )));
        }
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(Error::Dimension(format!(
                "mul {:?} * {:?}",
                x.shape, y.shape
            )));
        }
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v * factor).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Dimension(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| leaky_relu(v, slope)).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(a);
        self.push(value, Op::LeakyRelu(a, slope), needs)
    }

    /// Softmax over groups of entries sharing a group id. Every group in
    /// `0..n_groups` must be non-empty.
    pub fn segment_softmax(
        &mut self,
        logits: Var,
        groups: Arc<[usize]>,
        n_groups: usize,
    ) -> Result<Var> {
        let x = self.value(logits);
        let data = segment_softmax_values(&x.data, &groups, n_groups)?;
        let value = Tensor::new(x.shape.clone(), data)?;
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                input: logits,
                groups,
                n_groups,
            },
            needs,
        ))
    }

    /// Softmax across each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let groups: Arc<[usize]> = (0..rows * cols).map(|i| i / cols.max(1)).collect();
        let flat = self.reshape(a, vec![rows * cols])?;
        let soft = self.segment_softmax(flat, groups, rows)?;
        self.reshape(soft, vec![rows, cols])
    }

    /// `out[e] = input[index[e]]`, row-wise.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            if i >= rows {
                return Err(Error::Dimension(format!("gather row {i} of {rows}")));
            }
            data.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::GatherRows { input: a, index }, needs))
    }

    /// `out[index[e]] += input[e]`, producing `n_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<[usize]>, n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if rows != index.len() {
            return Err(Error::Dimension(format!(
                "scatter {rows} rows with {} indices",
                index.len()
            )));
        }
        let mut data = vec![T::zero(); n_rows * cols];
        for (e, &dst) in index.iter().enumerate() {
            if dst >= n_rows {
                return Err(Error::Dimension(format!("scatter row {dst} of {n_rows}")));
            }
            let out = &mut data[dst * cols..(dst + 1) * cols];
            for (o, &v) in out.iter_mut().zip(&x.data[e * cols..(e + 1) * cols]) {
                *o = *o + v;
            }
        }
        let value = Tensor::new(vec![n_rows, cols], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::ScatterAddRows { input: a, index }, needs))
    }

    /// Multiplies row `i` of `a` by the scalar `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(w));
        let (rows, cols) = x.dims2()?;
        if s.len() != rows {
            return Err(Error::Dimension(format!(
                "scale_rows: {rows} rows, {} weights",
                s.len()
            )));
        }
        let mut data = x.data.clone();
        for (chunk, &f) in data.chunks_mut(cols.max(1)).zip(&s.data) {
            for v in chunk {
                *v = *v * f;
            }
        }
        let value = Tensor::new(x.shape.clone(), data)?;
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(value, Op::ScaleRows(a, w), needs))
    }

    /// `out[dst[e]] += w[e] · values[src[e]]` over `n_rows` output rows:
    /// a gather by `src`, row scaling and a scatter by `dst` in one step.
    pub fn weighted_scatter(
        &mut self,
        values: Var,
        weights: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
        n_rows: usize,
    ) -> Result<Var> {
        let (x, w) = (self.value(values), self.value(weights));
        let (rows, cols) = x.dims2()?;
        if src.len() != dst.len() || w.len() != src.len() {
            return Err(Error::Dimension(format!(
                "weighted_scatter: {} sources, {} destinations, {} weights",
                src.len(),
                dst.len(),
                w.len()
            )));
        }
        let mut data = vec![T::zero(); n_rows * cols];
        for ((&s, &d), &we) in src.iter().zip(dst.iter()).zip(&w.data) {
            if s >= rows || d >= n_rows {
                return Err(Error::Dimension(format!("edge {s}->{d} outside {rows}x{n_rows}")));
            }
            let out = &mut data[d * cols..(d + 1) * cols];
            for (o, &v) in out.iter_mut().zip(&x.data[s * cols..(s + 1) * cols]) {
                *o = *o + we * v;
            }
        }
        let value = Tensor::new(vec![n_rows, cols], data)?;
        let needs = self.needs(values) || self.needs(weights);
        Ok(self.push(
            value,
            Op::WeightedScatter {
                values,
                weights,
                src,
                dst,
            },
            needs,
        ))
    }

    /// Natural log with inputs clamped from below at `floor`. Clamped
    /// entries are counted and receive zero gradient.
    pub fn log(&mut self, a: Var, floor: T) -> Var {
        let x = self.value(a);
        let mut clamps = 0;
        let data = x
            .data
            .iter()
            .map(|&v| {
                if v < floor {
                    clamps += 1;
                    floor.ln()
                } else {
                    v.ln()
                }
            })
            .collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.log_clamps += clamps;
        let needs = self.needs(a);
        self.push(value, Op::Log { input: a, floor }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Populates the
    /// gradient of every node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = x.dims2().expect("matmul lhs is a matrix");
                let (_, n) = y.dims2().expect("matmul rhs is a matrix");
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose(&y.data, k, n);
                    accumulate(grads, *a, &matmul_kernel(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = transpose(&x.data, m, k);
                    accumulate(grads, *b, &matmul_kernel(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().zip(&y.data).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g.iter().zip(&x.data).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, f) => {
                let d: Vec<T> = g.iter().map(|&g| g * *f).collect();
                accumulate(grads, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().expect("concat output is a matrix");
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().expect("concat part is a matrix");
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d: Vec<T> = g
                    .iter()
                    .zip(&x.data)
                    .map(|(&g, &x)| if x >= T::zero() { g } else { g * *slope })
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::SegmentSoftmax {
                input,
                groups,
                n_groups,
            } => {
                let y = &node.value.data;
                let mut dot = vec![T::zero(); *n_groups];
                for ((&gi, &yi), &grp) in g.iter().zip(y).zip(groups.iter()) {
                    dot[grp] = dot[grp] + gi * yi;
                }
                let d: Vec<T> = g
                    .iter()
                    .zip(y)
                    .zip(groups.iter())
                    .map(|((&gi, &yi), &grp)| yi * (gi - dot[grp]))
                    .collect();
                accumulate(grads, *input, &d);
            }
            Op::GatherRows { input, index } => {
                let x = self.value(*input);
                let (rows, cols) = x.dims2().expect("gather input is a matrix");
                let mut d = vec![T::zero(); rows * cols];
                for (e, &src) in index.iter().enumerate() {
                    let out = &mut d[src * cols..(src + 1) * cols];
                    for (o, &v) in out.iter_mut().zip(&g[e * cols..(e + 1) * cols]) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::ScatterAddRows { input, index } => {
                let (_, cols) = self.value(*input).dims2().expect("scatter input is a matrix");
                let mut d = Vec::with_capacity(index.len() * cols);
                for &dst in index.iter() {
                    d.extend_from_slice(&g[dst * cols..(dst + 1) * cols]);
                }
                accumulate(grads, *input, &d);
            }
            Op::ScaleRows(a, w) => {
                let (x, s) = (self.value(*a), self.value(*w));
                let (_, cols) = x.dims2().expect("scale_rows input is a matrix");
                let cols = cols.max(1);
                if self.needs(*a) {
                    let mut d = g.to_vec();
                    for (chunk, &f) in d.chunks_mut(cols).zip(&s.data) {
                        for v in chunk {
                            *v = *v * f;
                        }
                    }
                    accumulate(grads, *a, &d);
                }
                if self.needs(*w) {
                    let d: Vec<T> = g
                        .chunks(cols)
                        .zip(x.data.chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                        .collect();
                    accumulate(grads, *w, &d);
                }
            }
            Op::WeightedScatter {
                values,
                weights,
                src,
                dst,
            } => {
                let (x, w) = (self.value(*values), self.value(*weights));
                let (rows, cols) = x.dims2().expect("weighted_scatter input is a matrix");
                if self.needs(*values) {
                    let mut d = vec![T::zero(); rows * cols];
                    for ((&s, &t), &we) in src.iter().zip(dst.iter()).zip(&w.data) {
                        let out = &mut d[s * cols..(s + 1) * cols];
                        for (o, &gv) in out.iter_mut().zip(&g[t * cols..(t + 1) * cols]) {
                            *o = *o + we * gv;
                        }
                    }
                    accumulate(grads, *values, &d);
                }
                if self.needs(*weights) {
                    let d: Vec<T> = src
                        .iter()
                        .zip(dst.iter())
                        .map(|(&s, &t)| {
                            g[t * cols..(t + 1) * cols]
                                .iter()
                                .zip(&x.data[s * cols..(s + 1) * cols])
                                .map(|(&p, &q)| p * q)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, *weights, &d);
                }
            }
            Op::Log { input, floor } => {
                let x = self.value(*input);
                let d: Vec<T> = g
                    .iter()
                    .zip(&x.data)
                    .map(|(&g, &x)| if x < *floor { T::zero() } else { g / x })
                    .collect();
                accumulate(grads, *input, &d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

/// Max-shifted softmax within each group.
pub fn segment_softmax_values<T: Scalar>(
    logits: &[T],
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<T>> {
    if logits.len() != groups.len() {
        return Err(Error::Dimension(format!(
            "{} logits, {} group ids",
            logits.len(),
            groups.len()
        )));
    }
    let mut max = vec![T::neg_infinity(); n_groups];
    let mut count = vec![0usize; n_groups];
    for (&x, &grp) in logits.iter().zip(groups) {
        if grp >= n_groups {
            return Err(Error::Dimension(format!("group {grp} of {n_groups}")));
        }
        count[grp] += 1;
        if x > max[grp] {
            max[grp] = x;
        }
    }
    if let Some(node) = count.iter().position(|&c| c == 0) {
        return Err(Error::IsolatedNode { node });
    }
    let mut denom = vec![T::zero(); n_groups];
    let mut out: Vec<T> = logits
        .iter()
        .zip(groups)
        .map(|(&x, &grp)| {
            let e = (x - max[grp]).exp();
            denom[grp] = denom[grp] + e;
            e
        })
        .collect();
    for (o, &grp) in out.iter_mut().zip(groups) {
        *o = *o / denom[grp];
    }
    Ok(out)
}
