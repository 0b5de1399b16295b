//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. `backward` walks the tape from the output towards the leaves and
//! accumulates vector-Jacobian products. Matrix-shaped operations treat all
//! leading axes as rows and the last axis as columns.

use std::cell::{Ref, RefCell};

use super::tensor::{
    gelu, gelu_grad, matmul, matmul_nt, matmul_tn, row_stats, softmax_strided, transpose, Real, Tensor,
};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Gelu(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowNormalize(Var, T),
    SelectPerRow(Var, Vec<usize>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_dims(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var {
        let value = f(&self.value(a));
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Tensor<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| {
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            x.zip_map(y, |p, q| p + q)
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| {
            assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
            x.zip_map(y, |p, q| p - q)
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| {
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            x.zip_map(y, |p, q| p * q)
        })
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        self.binary(a, bias, Op::AddRow(a, bias), |x, b| {
            let n = x.cols();
            assert_eq!(b.len(), n, "add_row width mismatch");
            let bd = b.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        })
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x.map(|v| v * c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |x, y| {
            let (m, k) = mat_dims(x.shape());
            let (k2, n) = (y.shape()[0], y.cols());
            assert!(y.shape().len() == 2 && k == k2, "matmul shape mismatch {:?} x {:?}", x.shape(), y.shape());
            Tensor::from_parts(vec![m, n], matmul(x.data(), y.data(), m, k, n))
        })
    }

    /// `a x w + b`: a dense layer with weight `in x out` and bias `out`.
    pub fn linear(&self, a: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(a, w);
        self.add_row(h, b)
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), |x| x.transpose())
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        self.unary(a, Op::Softmax(a), |x| {
            let (m, n) = mat_dims(x.shape());
            Tensor::from_parts(x.shape().to_vec(), softmax_strided(x.data(), m, n, 1))
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmax(a), |x| {
            let (_, n) = mat_dims(x.shape());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                out.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        })
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            assert_eq!(g.len(), xv.cols(), "layer_norm gamma width mismatch");
            assert_eq!(b.len(), xv.cols(), "layer_norm beta width mismatch");
            xv.layer_norm(g.data(), b.data(), eps)
        };
        let needs = self.needs(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| x.map(gelu))
    }

    /// Average over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.unary(a, Op::MeanRows(a), |x| {
            let (m, n) = mat_dims(x.shape());
            let mut out = vec![T::zero(); n];
            for row in x.data().chunks(n) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            let inv = T::one() / T::c(m as f64);
            Tensor::from_parts(vec![1, n], out.into_iter().map(|v| v * inv).collect())
        })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::SliceCols(a, start), |x| {
            let (m, n) = mat_dims(x.shape());
            assert!(start + len <= n, "slice_cols out of range");
            let mut out = Vec::with_capacity(m * len);
            for row in x.data().chunks(n) {
                out.extend_from_slice(&row[start..start + len]);
            }
            Tensor::from_parts(vec![m, len], out)
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].0].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for p in parts {
                    let t = &nodes[p.0].value;
                    assert_eq!(t.rows(), m, "concat_cols row mismatch");
                    out.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_parts(vec![m, total], out)
        };
        let needs = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].0].value.cols();
            let mut out = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols(), n, "concat_rows width mismatch");
                out.extend_from_slice(t.data());
            }
            let m = out.len() / n;
            Tensor::from_parts(vec![m, n], out)
        };
        let needs = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(a, Op::GatherRows(a, idx.to_vec()), |x| {
            let (m, n) = mat_dims(x.shape());
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                assert!(i < m, "gather_rows index {i} out of range {m}");
                out.extend_from_slice(x.row(i));
            }
            Tensor::from_parts(vec![idx.len(), n], out)
        })
    }

    /// Divides each row by `max(||row||, floor)`.
    pub fn row_normalize(&self, a: Var, floor: T) -> Var {
        self.unary(a, Op::RowNormalize(a, floor), |x| {
            let (_, n) = mat_dims(x.shape());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                out.extend(row.iter().map(|&v| v / norm));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        })
    }

    /// Picks `a[i, cols[i]]` for every row, giving a vector of length `m`.
    pub fn select_per_row(&self, a: Var, cols: &[usize]) -> Var {
        self.unary(a, Op::SelectPerRow(a, cols.to_vec()), |x| {
            let (m, n) = mat_dims(x.shape());
            assert_eq!(cols.len(), m, "select_per_row needs one column per row");
            let out = cols
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    assert!(c < n, "select_per_row column out of range");
                    x.data()[i * n + c]
                })
                .collect();
            Tensor::from_parts(vec![m], out)
        })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.map(|v| v * v))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, Op::Mean(a), |x| Tensor::scalar(x.sum() / T::c(x.len() as f64)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        self.unary(a, Op::Reshape(a), |x| {
            assert_eq!(shape.iter().product::<usize>(), x.len(), "reshape size mismatch");
            Tensor::from_parts(shape.to_vec(), x.data().to_vec())
        })
    }

    /// Contributions whose sum is the element sum of `v`, found by expanding
    /// the additive reductions (`add`, `sub`, `scale`, `sum`, `mean`,
    /// `reshape`) at the top of its expression. Differencing two evaluations
    /// term by term avoids cancelling in the rounded total.
    pub fn terms(&self, v: Var) -> Vec<T> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        Self::expand(&nodes, v, T::one(), &mut out);
        out
    }

    fn expand(nodes: &[Node<T>], v: Var, w: T, out: &mut Vec<T>) {
        match &nodes[v.0].op {
            Op::Add(a, b) => {
                Self::expand(nodes, *a, w, out);
                Self::expand(nodes, *b, w, out);
            }
            Op::Sub(a, b) => {
                Self::expand(nodes, *a, w, out);
                Self::expand(nodes, *b, -w, out);
            }
            Op::Scale(a, c) => Self::expand(nodes, *a, w * *c, out),
            Op::Sum(a) | Op::Reshape(a) => Self::expand(nodes, *a, w, out),
            Op::Mean(a) => Self::expand(nodes, *a, w / T::c(nodes[a.0].value.len() as f64), out),
            _ => out.extend(nodes[v.0].value.data().iter().map(|&x| x * w)),
        }
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            bail!(Argument, "backward needs a scalar output, got shape {:?}", nodes[out.0].value.shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::from_parts(nodes[out.0].value.shape().to_vec(), vec![T::one()]));

        for idx in (0..=out.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = Acc { nodes: &nodes, grads: &mut grads };
            backprop(&node.op, &node.value, &g, &mut acc);
        }
        Ok(Gradients { grads })
    }
}

struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Real> Acc<'_, T> {
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Calls `f` with the (zero-initialized on first use) gradient buffer of `v`.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }

    fn add(&mut self, v: Var, g: &[T]) {
        self.with(v, |buf| {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = *b + x;
            }
        });
    }
}

fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, acc: &mut Acc<'_, T>) {
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(*a, gd);
            acc.add(*b, gd);
        }
        Op::Sub(a, b) => {
            acc.add(*a, gd);
            let neg: Vec<T> = gd.iter().map(|&v| -v).collect();
            acc.add(*b, &neg);
        }
        Op::Mul(a, b) => {
            let ga: Vec<T> = gd.iter().zip(acc.val(*b).data()).map(|(&g, &y)| g * y).collect();
            let gb: Vec<T> = gd.iter().zip(acc.val(*a).data()).map(|(&g, &x)| g * x).collect();
            acc.add(*a, &ga);
            acc.add(*b, &gb);
        }
        Op::AddRow(a, bias) => {
            acc.add(*a, gd);
            let n = g.cols();
            acc.with(*bias, |buf| {
                for row in gd.chunks(n) {
                    for (b, &x) in buf.iter_mut().zip(row) {
                        *b = *b + x;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            let ga: Vec<T> = gd.iter().map(|&v| v * *c).collect();
            acc.add(*a, &ga);
        }
        Op::MatMul(a, b) => {
            let (m, k) = mat_dims(acc.val(*a).shape());
            let n = acc.val(*b).cols();
            if acc.wants(*a) {
                let ga = matmul_nt(gd, acc.val(*b).data(), m, n, k);
                acc.add(*a, &ga);
            }
            if acc.wants(*b) {
                let gb = matmul_tn(acc.val(*a).data(), gd, m, k, n);
                acc.add(*b, &gb);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.rows(), out.cols());
            acc.add(*a, &transpose(gd, m, n));
        }
        Op::Softmax(a) => {
            let n = out.cols();
            let mut ga = Vec::with_capacity(gd.len());
            for (yr, gr) in out.data().chunks(n).zip(gd.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                ga.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            acc.add(*a, &ga);
        }
        Op::LogSoftmax(a) => {
            let n = out.cols();
            let mut ga = Vec::with_capacity(gd.len());
            for (yr, gr) in out.data().chunks(n).zip(gd.chunks(n)) {
                let total: T = gr.iter().copied().sum();
                ga.extend(yr.iter().zip(gr).map(|(&y, &g)| g - y.exp() * total));
            }
            acc.add(*a, &ga);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = acc.val(*x);
            let n = xv.cols();
            let gam = acc.val(*gamma).data().to_vec();
            let mut gx = Vec::with_capacity(xv.len());
            let mut ggamma = vec![T::zero(); n];
            let mut gbeta = vec![T::zero(); n];
            let nf = T::c(n as f64);
            for (xr, gr) in xv.data().chunks(n).zip(gd.chunks(n)) {
                let (mean, inv) = row_stats(xr, *eps);
                let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * inv).collect();
                let dxhat: Vec<T> = gr.iter().zip(&gam).map(|(&g, &w)| g * w).collect();
                let m1 = dxhat.iter().copied().sum::<T>() / nf;
                let m2 = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<T>() / nf;
                for j in 0..n {
                    ggamma[j] = ggamma[j] + gr[j] * xhat[j];
                    gbeta[j] = gbeta[j] + gr[j];
                    gx.push(inv * (dxhat[j] - m1 - xhat[j] * m2));
                }
            }
            acc.add(*x, &gx);
            acc.add(*gamma, &ggamma);
            acc.add(*beta, &gbeta);
        }
        Op::Gelu(a) => {
            let ga: Vec<T> = gd.iter().zip(acc.val(*a).data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
            acc.add(*a, &ga);
        }
        Op::MeanRows(a) => {
            let (m, n) = mat_dims(acc.val(*a).shape());
            let inv = T::one() / T::c(m as f64);
            acc.with(*a, |buf| {
                for row in buf.chunks_mut(n) {
                    for (b, &x) in row.iter_mut().zip(gd) {
                        *b = *b + x * inv;
                    }
                }
            });
        }
        Op::SliceCols(a, start) => {
            let len = out.cols();
            let n = acc.val(*a).cols();
            acc.with(*a, |buf| {
                for (row, gr) in buf.chunks_mut(n).zip(gd.chunks(len)) {
                    for (b, &x) in row[*start..*start + len].iter_mut().zip(gr) {
                        *b = *b + x;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = acc.val(*p).cols();
                acc.with(*p, |buf| {
                    for (row, gr) in buf.chunks_mut(w).zip(gd.chunks(total)) {
                        for (b, &x) in row.iter_mut().zip(&gr[offset..offset + w]) {
                            *b = *b + x;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = acc.val(*p).len();
                acc.add(*p, &gd[offset..offset + len]);
                offset += len;
            }
        }
        Op::GatherRows(a, idx) => {
            let n = out.cols();
            acc.with(*a, |buf| {
                for (r, &i) in idx.iter().enumerate() {
                    for (b, &x) in buf[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *b = *b + x;
                    }
                }
            });
        }
        Op::RowNormalize(a, floor) => {
            let xv = acc.val(*a);
            let n = xv.cols();
            let mut ga = Vec::with_capacity(xv.len());
            for ((xr, yr), gr) in xv.data().chunks(n).zip(out.data().chunks(n)).zip(gd.chunks(n)) {
                let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > *floor {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * dot) / norm));
                } else {
                    ga.extend(gr.iter().map(|&g| g / *floor));
                }
            }
            acc.add(*a, &ga);
        }
        Op::SelectPerRow(a, cols) => {
            let n = acc.val(*a).cols();
            acc.with(*a, |buf| {
                for (i, &c) in cols.iter().enumerate() {
                    buf[i * n + c] = buf[i * n + c] + gd[i];
                }
            });
        }
        Op::Square(a) => {
            let two = T::c(2.0);
            let ga: Vec<T> = gd.iter().zip(acc.val(*a).data()).map(|(&g, &x)| two * x * g).collect();
            acc.add(*a, &ga);
        }
        Op::Sum(a) => {
            let g0 = gd[0];
            acc.with(*a, |buf| buf.iter_mut().for_each(|b| *b = *b + g0));
        }
        Op::Mean(a) => {
            let g0 = gd[0] / T::c(acc.val(*a).len() as f64);
            acc.with(*a, |buf| buf.iter_mut().for_each(|b| *b = *b + g0));
        }
        Op::Reshape(a) => acc.add(*a, gd),
    }
}
