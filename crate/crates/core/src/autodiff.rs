//! Reverse-mode automatic differentiation over a single linear tape.
//!
//! Every op appends a node holding its forward value and enough context to
//! run its backward rule. [`Tape::backward`] replays the tape in reverse
//! (insertion order is already a topological order) and consumes it.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
    Nll { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of forward ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in gradient computation when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x + row` where `row` has as many elements as `x` has columns; the row
    /// is added to every leading-axis slice.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Row softmax of a square score matrix that ignores entries above the diagonal.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let v = tensor::causal_softmax(self.value(x))?;
        Ok(self.push(v, Op::CausalSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, xhat, rstd) =
            tensor::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Rows of a matrix picked by index (repeats allowed); embedding lookup,
    /// nearest-neighbour upsampling and position selection all use this.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (rows, cols) = src.as_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::new(&[idx.len(), cols], data)?;
        Ok(self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let (rows, cols) = src.as_matrix("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols",
                index: end,
                size: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let v = Tensor::new(&[rows, end - start], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.as_matrix("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.as_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), t.shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(&[rows, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let n = x.numel() as f64;
        let s = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, vocab) = l.as_matrix("nll")?;
        if targets.len() != rows {
            return Err(Error::shape("nll", l.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "nll target id",
                index: bad,
                size: vocab,
            });
        }
        let probs = tensor::softmax(l, 1)?;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / rows as f64);
        let op = Op::Nll {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(v, op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalar(loss_value.shape().to_vec()));
        }
        if !loss_value.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        let mut out = Gradients { grads };
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                out.grads[i] = None;
            } else if let Some(g) = &out.grads[i] {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of leaf {i}")));
                }
            }
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = zip_with(g, val(*b), |p, q| p * q);
                let gb = zip_with(g, val(*a), |p, q| p * q);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddRow(x, row) => {
                let d = g.cols();
                let mut gr = vec![0.0; d];
                for chunk in g.data().chunks(d) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*row, Tensor::new(val(*row).shape(), gr)?);
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, tensor::matmul_nt(g, val(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, tensor::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.nodes[a.0].requires_grad {
                    acc(*a, tensor::matmul(g, val(*b))?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, tensor::matmul_tn(g, val(*a))?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose2()?),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = tensor::axis_layout(y.shape(), *axis);
                let mut out = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g.data()[base + j * inner] * y.data()[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let k = base + j * inner;
                            out[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape(), out)?);
            }
            Op::CausalSoftmax(x) => {
                // masked entries have y = 0, so the generic rule applies unchanged
                let y = &node.value;
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape(), out)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = rstd.len();
                let mut dx = vec![0.0; g.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, Tensor::new(g.shape(), dx)?);
                acc(*gamma, Tensor::new(val(*gamma).shape(), dgamma)?);
                acc(*beta, Tensor::new(val(*beta).shape(), dbeta)?);
            }
            Op::Gelu(x) => acc(*x, zip_with(g, val(*x), |p, q| p * tensor::gelu_grad(q))),
            Op::GatherRows { x, idx } => {
                let src = val(*x);
                let cols = src.cols();
                let mut out = vec![0.0; src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(src.shape(), out)?);
            }
            Op::SliceCols { x, start } => {
                let src = val(*x);
                let (rows, cols) = (src.rows(), src.cols());
                let w = g.cols();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(src.shape(), out)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let piece = g.data()[offset..offset + n].to_vec();
                    acc(p, Tensor::new(val(p).shape(), piece)?);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut piece = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        piece.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(p, Tensor::new(val(p).shape(), piece)?);
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mse(a, b) => {
                let n = val(*a).numel() as f64;
                let k = 2.0 * g.item() / n;
                let diff = zip_with(val(*a), val(*b), |p, q| k * (p - q));
                acc(*b, diff.map(|x| -x));
                acc(*a, diff);
            }
            Op::Nll {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let k = g.item() / rows as f64;
                let mut out = probs.map(|p| p * k);
                let cols = out.cols();
                for (r, &t) in targets.iter().enumerate() {
                    out.data_mut()[r * cols + t] -= k;
                }
                acc(*logits, out);
            }
        }
        Ok(())
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
