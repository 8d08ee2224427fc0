//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in an append-only arena, so
//! node order is a valid topological order and backward is a single reverse
//! sweep.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, View};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map over rows: `out[r] = Σ w · x[i]` for each `(i, w)` tap of row `r`.
///
/// Gathers, bilinear interpolation, pooling and segment means are all
/// expressed this way.
#[derive(Clone, Debug, Default)]
pub struct RowMixing<T> {
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<T>,
}

impl<T: Scalar> RowMixing<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        for (i, w) in taps {
            self.index.push(i);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .copied()
            .zip(self.weight[span].iter().copied())
    }

    fn max_index(&self) -> Option<usize> {
        self.index.iter().copied().max()
    }

    /// Applies the mixing to a dense `[n, cols]` buffer.
    pub fn apply(&self, x: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows() * cols];
        for r in 0..self.rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let src = &x[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + w * *s;
                }
            }
        }
        out
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch * nq, dim]`, keys and values `[batch * nk, dim]`, with
/// `dim` split evenly into `heads` contiguous groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        b: Var,
    },
    MulRow {
        x: Var,
        g: Var,
    },
    Scale(Var, T),
    Square(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    RowMix {
        x: Var,
        mix: Rc<RowMixing<T>>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MaskRows {
        x: Var,
        keep: Rc<Vec<bool>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::RowMix { .. } => "row_mix",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::MaskRows { .. } => "mask_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation graph for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
    non_finite: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
            non_finite: None,
        }
    }

    /// Enables or disables the per-op non-finite scan.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Name of the first op that produced a NaN or infinity, if scanning is on.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.check_finite && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf input.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a parameter of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies the current value into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ----------------------------------------------------------------- ops

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return shape_err("linear", &xs, &ws);
        }
        let (n, i, o) = (self.value(x).rows(), ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return shape_err("linear bias", &ws, self.shape(b));
            }
        }
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), n, i, o);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bias) {
                    *y = *y + *bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// Standard 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let out = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[sa[0], sb[1]], out)?, Op::MatMul(a, b), needs))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op.name(), self.shape(a), self.shape(b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn rowwise(&mut self, x: Var, r: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(r).numel() != c {
            return shape_err(op.name(), self.shape(x), self.shape(r));
        }
        let rv = self.value(r).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(&rv) {
                *v = f(*v, *s);
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x) || self.needs(r);
        Ok(self.push(t, op, needs))
    }

    /// Adds a vector to every row (broadcast over leading axes).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.rowwise(x, b, Op::AddRow { x, b }, |v, s| v + s)
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.rowwise(x, g, Op::MulRow { x, g }, |v, s| v * s)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.cols();
        kernels::softmax_rows(t.data_mut(), n, None);
        let needs = self.needs(x);
        self.push(t, Op::Softmax(x), needs)
    }

    /// Layer normalization over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if n < 2 {
            return Err(Error::Contract(
                "layer_norm needs a normalized axis of length >= 2".into(),
            ));
        }
        if self.value(g).numel() != n || self.value(b).numel() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(g));
        }
        let eps = T::c(LAYER_NORM_EPS);
        let nf = T::c(n as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `keep`, when given, has `batch * nk` flags; dropped keys get zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        keep: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let AttnShape {
            batch,
            nq,
            nk,
            heads,
        } = shape;
        let d = self.value(q).cols();
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Contract(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if self.value(q).rows() != batch * nq
            || self.value(k).rows() != batch * nk
            || ks != vs
            || self.value(k).cols() != d
        {
            return shape_err("attention", &qs, &ks);
        }
        if let Some(m) = &keep {
            if m.len() != batch * nk {
                return shape_err("attention mask", &ks, &[m.len()]);
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); batch * nq * d];
        let mut probs = vec![T::zero(); batch * heads * nq * nk];
        for bi in 0..batch {
            let keep_b = keep.as_ref().map(|m| &m[bi * nk..(bi + 1) * nk]);
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];
                let qv = View {
                    offset: bi * nq * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                let kt = View {
                    offset: bi * nk * d + h * dh,
                    rs: 1,
                    cs: d,
                };
                kernels::gemm(nq, dh, nk, scale, qd, qv, kd, kt, T::zero(), p, View::rows(0, nk));
                for row in p.chunks_mut(nk) {
                    kernels::softmax_row(row, keep_b);
                }
                let vv = View {
                    offset: bi * nk * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                kernels::gemm(nq, nk, dh, T::one(), p, View::rows(0, nk), vd, vv, T::zero(), &mut out, qv);
            }
        }
        let t = Tensor::new(&qs, out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            needs,
        ))
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    /// Attention probabilities saved by an attention node, laid out as
    /// `[batch, heads, nq, nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2-D convolution of one `[h, w, cin]` image with a `[k*k*cin, cout]`
    /// kernel, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != k * k * xs[2] || stride == 0 {
            return shape_err("conv2d", &xs, &ws);
        }
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ws[1],
            k,
            stride,
        };
        if self.value(b).numel() != geom.cout {
            return shape_err("conv2d bias", &ws, self.shape(b));
        }
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let mut out = kernels::matmul(&cols, self.value(w).data(), ho * wo, geom.patch(), geom.cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(geom.cout) {
            for (y, bb) in row.iter_mut().zip(bias) {
                *y = *y + *bb;
            }
        }
        let t = Tensor::new(&[ho, wo, geom.cout], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    /// Row mixing of a `[n, c]` input (leading axes flattened) into `[rows, c]`.
    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMixing<T>>) -> Result<Var> {
        let (n, c) = (self.value(x).rows(), self.value(x).cols());
        if mix.max_index().is_some_and(|i| i >= n) || mix.rows() == 0 {
            return shape_err("row_mix", self.shape(x), &[mix.rows()]);
        }
        let out = mix.apply(self.value(x).data(), c);
        let t = Tensor::new(&[mix.rows(), c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::RowMix { x, mix }, needs))
    }

    /// Concatenation along the last axis of 2-D inputs with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return shape_err("concat", self.shape(parts[0]), self.shape(p));
            }
            cols += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::c(t.numel() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Replaces rows whose `keep` flag is false with the constant `fill` row.
    pub fn mask_rows(&mut self, x: Var, keep: Rc<Vec<bool>>, fill: &[T]) -> Result<Var> {
        let (n, c) = (self.value(x).rows(), self.value(x).cols());
        if keep.len() != n || fill.len() != c {
            return shape_err("mask_rows", self.shape(x), &[keep.len(), fill.len()]);
        }
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            if !keep[r] {
                row.copy_from_slice(fill);
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaskRows { x, keep }, needs))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, ii, o) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let dx = self.acc(grads, *x);
                    kernels::gemm(n, o, ii, T::one(), dy, View::rows(0, o), wv.data(), View::rows_t(0, o), T::one(), dx, View::rows(0, ii));
                }
                if self.needs(*w) {
                    let dw = self.acc(grads, *w);
                    kernels::gemm(ii, n, o, T::one(), xv.data(), View::rows_t(0, ii), dy, View::rows(0, o), T::one(), dw, View::rows(0, o));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = self.acc(grads, *b);
                        colsum_into(dy, o, db);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let da = self.acc(grads, *a);
                    kernels::gemm(m, n, k, T::one(), dy, View::rows(0, n), bv.data(), View::rows_t(0, n), T::one(), da, View::rows(0, k));
                }
                if self.needs(*b) {
                    let db = self.acc(grads, *b);
                    kernels::gemm(k, m, n, T::one(), av.data(), View::rows_t(0, k), dy, View::rows(0, n), T::one(), db, View::rows(0, n));
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |d| axpy(d, dy, T::one()));
                self.acc_with(grads, *b, |d| axpy(d, dy, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |d| axpy(d, dy, T::one()));
                self.acc_with(grads, *b, |d| axpy(d, dy, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |d| {
                    for ((g, &u), &w) in d.iter_mut().zip(dy).zip(bv) {
                        *g = *g + u * w;
                    }
                });
                self.acc_with(grads, *b, |d| {
                    for ((g, &u), &w) in d.iter_mut().zip(dy).zip(av) {
                        *g = *g + u * w;
                    }
                });
            }
            Op::AddRow { x, b } => {
                let c = self.value(*x).cols();
                self.acc_with(grads, *x, |d| axpy(d, dy, T::one()));
                self.acc_with(grads, *b, |d| colsum_into(dy, c, d));
            }
            Op::MulRow { x, g } => {
                let c = self.value(*x).cols();
                let (xv, gv) = (self.value(*x).data(), self.value(*g).data());
                self.acc_with(grads, *x, |d| {
                    for (drow, dyrow) in d.chunks_mut(c).zip(dy.chunks(c)) {
                        for ((o, &u), &s) in drow.iter_mut().zip(dyrow).zip(gv) {
                            *o = *o + u * s;
                        }
                    }
                });
                self.acc_with(grads, *g, |d| {
                    for (dyrow, xrow) in dy.chunks(c).zip(xv.chunks(c)) {
                        for ((o, &u), &s) in d.iter_mut().zip(dyrow).zip(xrow) {
                            *o = *o + u * s;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.acc_with(grads, *x, |d| axpy(d, dy, *c)),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::c(2.0);
                self.acc_with(grads, *x, |d| {
                    for ((g, &u), &v) in d.iter_mut().zip(dy).zip(xv) {
                        *g = *g + two * v * u;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |d| {
                    for ((g, &u), &v) in d.iter_mut().zip(dy).zip(xv) {
                        *g = *g + u * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.acc_with(grads, *x, |d| {
                    for ((g, &u), &s) in d.iter_mut().zip(dy).zip(yv) {
                        *g = *g + u * s * (T::one() - s);
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = node.value.data();
                let n = node.value.cols();
                self.acc_with(grads, *x, |d| {
                    for ((drow, dyrow), yrow) in d.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n)) {
                        let dot: T = dyrow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((g, &u), &y) in drow.iter_mut().zip(dyrow).zip(yrow) {
                            *g = *g + y * (u - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let nf = T::c(n as f64);
                let gv = self.value(*g).data();
                self.acc_with(grads, *x, |d| {
                    let mut dxhat = vec![T::zero(); n];
                    for (r, drow) in d.chunks_mut(n).enumerate() {
                        let dyrow = &dy[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = dyrow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / nf;
                        let m2 = dxhat.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() / nf;
                        for j in 0..n {
                            drow[j] = drow[j] + inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
                self.acc_with(grads, *g, |d| {
                    for (dyrow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &u), &h) in d.iter_mut().zip(dyrow).zip(hrow) {
                            *o = *o + u * h;
                        }
                    }
                });
                self.acc_with(grads, *b, |d| colsum_into(dy, n, d));
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, dy, grads),
            Op::Conv2d { x, w, b, geom, cols } => {
                let howo = geom.out_h() * geom.out_w();
                let (patch, cout) = (geom.patch(), geom.cout);
                if self.needs(*w) {
                    let dw = self.acc(grads, *w);
                    kernels::gemm(patch, howo, cout, T::one(), cols, View::rows_t(0, patch), dy, View::rows(0, cout), T::one(), dw, View::rows(0, cout));
                }
                if self.needs(*b) {
                    let db = self.acc(grads, *b);
                    colsum_into(dy, cout, db);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); howo * patch];
                    kernels::gemm(howo, cout, patch, T::one(), dy, View::rows(0, cout), wv, View::rows_t(0, cout), T::zero(), &mut dcols, View::rows(0, patch));
                    let dx = self.acc(grads, *x);
                    kernels::col2im(&dcols, geom, dx);
                }
            }
            Op::RowMix { x, mix } => {
                let c = node.value.cols();
                self.acc_with(grads, *x, |d| {
                    for r in 0..mix.rows() {
                        let dyrow = &dy[r * c..(r + 1) * c];
                        for (src, w) in mix.row(r) {
                            for (o, &u) in d[src * c..(src + 1) * c].iter_mut().zip(dyrow) {
                                *o = *o + w * u;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc_with(grads, p, |d| {
                        for r in 0..rows {
                            let src = &dy[r * total + start..r * total + start + c];
                            for (o, &u) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o = *o + u;
                            }
                        }
                    });
                    start += c;
                }
            }
            Op::Sum(x) => {
                let u = dy[0];
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|g| *g = *g + u));
            }
            Op::Mean(x) => {
                let u = dy[0] / T::c(self.value(*x).numel() as f64);
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|g| *g = *g + u));
            }
            Op::Reshape(x) => self.acc_with(grads, *x, |d| axpy(d, dy, T::one())),
            Op::MaskRows { x, keep } => {
                let c = node.value.cols();
                self.acc_with(grads, *x, |d| {
                    for (r, (drow, dyrow)) in d.chunks_mut(c).zip(dy.chunks(c)).enumerate() {
                        if keep[r] {
                            axpy(drow, dyrow, T::one());
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[T],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttnShape {
            batch,
            nq,
            nk,
            heads,
        } = shape;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); nq * nk];
        for bi in 0..batch {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];
                let qv = View {
                    offset: bi * nq * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                let kv = View {
                    offset: bi * nk * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                let kt = View {
                    offset: kv.offset,
                    rs: 1,
                    cs: d,
                };
                // dV += Pᵀ dO
                kernels::gemm(nk, nq, dh, T::one(), p, View::rows_t(0, nk), dy, qv, T::one(), &mut dv, kv);
                // dP = dO Vᵀ
                kernels::gemm(nq, dh, nk, T::one(), dy, qv, vd, kt, T::zero(), &mut dp, View::rows(0, nk));
                for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pp) in drow.iter_mut().zip(prow) {
                        *g = pp * (*g - dot) * scale;
                    }
                }
                // dQ += dS K, dK += dSᵀ Q
                kernels::gemm(nq, nk, dh, T::one(), &dp, View::rows(0, nk), kd, kv, T::one(), &mut dq, qv);
                kernels::gemm(nk, nq, dh, T::one(), &dp, View::rows_t(0, nk), qd, qv, T::one(), &mut dk, kv);
            }
        }
        self.acc_with(grads, q, |g| axpy(g, &dq, T::one()));
        self.acc_with(grads, k, |g| axpy(g, &dk, T::one()));
        self.acc_with(grads, v, |g| axpy(g, &dv, T::one()));
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.needs(v) {
            f(self.acc(grads, v));
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn colsum_into<T: Scalar>(dy: &[T], cols: usize, out: &mut [T]) {
    for row in dy.chunks(cols) {
        for (o, &u) in out.iter_mut().zip(row) {
            *o = *o + u;
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter; `None` if the parameter did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}
