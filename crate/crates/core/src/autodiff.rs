//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameters that were
//! pulled into the graph. Only the operations the lane model needs are provided,
//! several of them fused (bilinear deformable sampling, pinhole projection,
//! sinusoidal embedding, layer norm, BCE) so the tape stays short.

use std::rc::Rc;

use crate::geometry::{bilinear_taps, CameraRig, MIN_DEPTH};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => add_into(&mut d.data, &s.data),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of one deformable sampling call.
#[derive(Debug, Clone)]
struct DeformSpec {
    levels: Vec<(usize, usize)>,
    queries: usize,
    heads: usize,
    points: usize,
    samples: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Detach,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    ScaleCols(Var, Rc<Vec<f64>>),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Sum(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowMatConst(Var, Rc<Vec<f64>>, usize),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    SelectRows(Var, Rc<Vec<usize>>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ChwToHwc {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Project {
        pts: Var,
        rig: Box<CameraRig>,
    },
    SinEmbed {
        x: Var,
        freqs: Rc<Vec<f64>>,
    },
    Deform {
        values: Vec<Var>,
        refs: Var,
        offsets: Option<Var>,
        weights: Var,
        spec: Box<DeformSpec>,
    },
    BceLogits {
        x: Var,
        target: Rc<Vec<f64>>,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the callers pass slices whose extents cover the strided m×k, k×n and m×n views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.data.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf; repeated requests return the same node so gradients accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Detach, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let mut t = self.value(x).clone();
        assert_eq!(shape.iter().product::<usize>(), t.numel(), "reshape size");
        t.shape = shape.to_vec();
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.numel(),
            tb.numel(),
            "elementwise size mismatch {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// Adds a length-`n` row vector to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        let n = ta.cols();
        assert_eq!(tr.numel(), n, "add_row width");
        let mut t = ta.clone();
        for chunk in t.data.chunks_mut(n) {
            add_into(chunk, &tr.data);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    /// `a + c` for a constant tensor of the same size.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let mut t = self.value(a).clone();
        assert_eq!(t.numel(), c.len(), "add_const size");
        add_into(&mut t.data, c);
        let ng = self.ng(a);
        self.push(t, Op::AddConst(a), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let n = self.value(a).numel();
        self.add_const(a, &vec![c; n])
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let mut t = self.value(a).clone();
        assert_eq!(t.numel(), c.len(), "mul_const size");
        t.data.iter_mut().zip(&c).for_each(|(v, k)| *v *= k);
        let ng = self.ng(a);
        self.push(t, Op::MulConst(a, Rc::new(c)), ng)
    }

    /// Multiplies column `j` of `a[.., n]` by `c[j]`.
    pub fn scale_cols(&mut self, a: Var, c: Vec<f64>) -> Var {
        let mut t = self.value(a).clone();
        let n = t.cols();
        assert_eq!(n, c.len(), "scale_cols width");
        for chunk in t.data.chunks_mut(n) {
            chunk.iter_mut().zip(&c).for_each(|(v, k)| *v *= k);
        }
        let ng = self.ng(a);
        self.push(t, Op::ScaleCols(a, Rc::new(c)), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= k);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    /// `a[m,k] · b[k,n]`, where `a` may have any leading shape flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape.len(), 2, "matmul rhs must be 2-D");
        let k = ta.cols();
        let m = ta.rows();
        let n = tb.shape[1];
        assert_eq!(tb.shape[0], k, "matmul inner dims {:?} x {:?}", ta.shape, tb.shape);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, k as isize, 1, &tb.data, n as isize, 1, &mut out, 0.0);
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out), Op::MatMul(a, b), ng)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.cols();
        assert_eq!(tb.cols(), k, "matmul_nt inner dims");
        let m = ta.rows();
        let n = tb.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, k as isize, 1, &tb.data, 1, k as isize, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b), ng)
    }

    /// `x · w + b` with `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv);
        self.add_row(y, bv)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape.clone(), ta.data.iter().map(|v| f(*v)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |v| v.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary(a, softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    /// Softmax over the last dimension. With a mask, masked-out entries get
    /// weight 0 and the remaining entries of each row sum to 1. A row with every entry
    /// masked falls back to the plain softmax so that it still sums to 1.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        if let Some(m) = &mask {
            assert_eq!(m.len(), ta.numel(), "softmax mask size");
        }
        let mut out = ta.data.clone();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let any = mask.as_ref().is_none_or(|m| m[r * n..(r + 1) * n].iter().any(|&k| k));
            let keep = |j: usize| !any || mask.as_ref().is_none_or(|m| m[r * n + j]);
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - mx).exp();
                    s += *v;
                } else {
                    *v = 0.0;
                }
            }
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(ta.shape.clone(), out), Op::Softmax(a), ng)
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let g = self.param(gamma);
        let b = self.param(beta);
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(g), self.value(b));
        let mut out = tx.data.clone();
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data[j] + tb.data[j];
            }
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::LayerNorm { x, gamma: g, beta: b }, true)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Concatenation along the last dimension; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            assert_eq!(self.value(*p).rows(), rows, "concat row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(*p).data;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = self.value(parts[0]).shape.clone();
        *shape.last_mut().unwrap() = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec()), ng)
    }

    /// Stacks 2-D tensors with equal column counts along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), n, "concat_rows width mismatch");
            rows += t.rows();
            out.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row-wise product with per-row constant matrices: `out[b] = a[b, :] · c[b]`,
    /// `a[B, m]`, `c[B, m, n]` row-major, result `[B, n]`.
    pub fn row_matmul_const(&mut self, a: Var, c: Vec<f64>, n: usize) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let b = ta.rows();
        assert_eq!(c.len(), b * m * n, "row_matmul_const size");
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            for i in 0..m {
                let av = ta.data[r * m + i];
                if av == 0.0 {
                    continue;
                }
                let row = &c[(r * m + i) * n..(r * m + i + 1) * n];
                for (o, cv) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o += av * cv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![b, n], out), Op::RowMatConst(a, Rc::new(c), n), ng)
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let n = tx.cols();
        assert!(start + len <= n, "narrow out of range");
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data[r * n + start..r * n + start + len]);
        }
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::Narrow { x, start, len }, ng)
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        let n = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(&tx.data[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![idx.len(), n], out);
        self.push(t, Op::SelectRows(x, Rc::new(idx)), ng)
    }

    /// 2-D convolution of a `[C, H, W]` input with `w[O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, pad: usize) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let tx = self.value(x);
        let tw = self.value(wv);
        assert_eq!(tx.shape.len(), 3, "conv2d input must be [C,H,W]");
        let (c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (o, k) = (tw.shape[0], tw.shape[2]);
        assert_eq!(tw.shape[1], c, "conv2d channel mismatch");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let spec = ConvSpec {
            in_ch: c,
            out_ch: o,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let col = im2col(&tx.data, &spec);
        let ckk = c * k * k;
        let npix = oh * ow;
        let mut out = vec![0.0; o * npix];
        gemm(
            o,
            ckk,
            npix,
            &tw.data,
            ckk as isize,
            1,
            &col,
            npix as isize,
            1,
            &mut out,
            0.0,
        );
        let tb = self.value(bv);
        for (oc, chunk) in out.chunks_mut(npix).enumerate() {
            let bias = tb.data[oc];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::new(vec![o, oh, ow], out);
        self.push(t, Op::Conv2d { x, w: wv, b: bv, spec }, true)
    }

    /// `[C, H, W]` to `[H, W, C]`.
    pub fn chw_to_hwc(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = tx.data[ch * h * w + p];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![h, w, c], out), Op::ChwToHwc { x, c, h, w }, ng)
    }

    /// Pinhole projection of ground points `[P, 3]` to pixels `[P, 2]`.
    /// Points at or behind the camera plane map to a far off-image location with zero gradient.
    pub fn project(&mut self, pts: Var, rig: &CameraRig) -> Var {
        let tp = self.value(pts);
        assert_eq!(tp.cols(), 3, "project expects [P,3]");
        let mut out = Vec::with_capacity(tp.rows() * 2);
        for p in tp.data.chunks(3) {
            let c = rig.to_camera([p[0], p[1], p[2]]);
            if c[2] > MIN_DEPTH {
                let uv = rig.camera_to_pixel(c);
                out.extend_from_slice(&uv);
            } else {
                out.extend_from_slice(&[OFF_IMAGE, OFF_IMAGE]);
            }
        }
        let ng = self.ng(pts);
        let t = Tensor::new(vec![tp.rows(), 2], out);
        self.push(
            t,
            Op::Project {
                pts,
                rig: Box::new(rig.clone()),
            },
            ng,
        )
    }

    /// Sinusoidal embedding of every scalar: `x[.., n]` becomes `[.., n * 2F]` laid out as
    /// `(sin(x ω_0), cos(x ω_0), sin(x ω_1), ...)` per scalar.
    pub fn sin_embed(&mut self, x: Var, freqs: Vec<f64>) -> Var {
        let tx = self.value(x);
        let f = freqs.len();
        let mut out = Vec::with_capacity(tx.numel() * 2 * f);
        for v in &tx.data {
            for w in &freqs {
                let (s, c) = (v * w).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() *= 2 * f;
        let ng = self.ng(x);
        self.push(
            Tensor::new(shape, out),
            Op::SinEmbed {
                x,
                freqs: Rc::new(freqs),
            },
            ng,
        )
    }

    /// Multi-level deformable bilinear sampling with attention-weighted aggregation.
    ///
    /// * `values`: one `[H_l, W_l, D]` map per level,
    /// * `refs`: `[Q, L, N, 2]` reference locations in each level's pixel coordinates,
    /// * `offsets`: optional `[Q, M, L, N, K, 2]` offsets (level pixels),
    /// * `weights`: `[Q, M, L, N, K]` aggregation weights.
    ///
    /// Head `m` reads channels `m·D/M .. (m+1)·D/M`. Output `[Q, D]`.
    pub fn deform_sample(
        &mut self,
        values: &[Var],
        refs: Var,
        offsets: Option<Var>,
        weights: Var,
        heads: usize,
        samples: usize,
    ) -> Var {
        let levels: Vec<(usize, usize)> = values
            .iter()
            .map(|v| {
                let s = self.shape(*v);
                (s[0], s[1])
            })
            .collect();
        let dim = self.shape(values[0])[2];
        assert_eq!(dim % heads, 0, "feature dim must divide into heads");
        let tr = self.value(refs);
        let l = levels.len();
        let q = tr.shape[0];
        let n = tr.numel() / (q * l * 2);
        assert_eq!(tr.numel(), q * l * n * 2, "refs shape");
        let spec = DeformSpec {
            levels,
            queries: q,
            heads,
            points: n,
            samples,
            dim,
        };
        assert_eq!(
            self.value(weights).numel(),
            q * heads * l * n * samples,
            "weights shape"
        );
        if let Some(o) = offsets {
            assert_eq!(self.value(o).numel(), q * heads * l * n * samples * 2, "offsets shape");
        }
        let hd = dim / heads;
        let mut out = vec![0.0; q * dim];
        {
            let vals: Vec<&Tensor> = values.iter().map(|v| self.value(*v)).collect();
            let tw = self.value(weights);
            let to = offsets.map(|o| self.value(o));
            for_each_sample(
                &spec,
                &tr.data,
                to.map(|t| t.data.as_slice()),
                |qi, mi, li, idx, u, v| {
                    let a = tw.data[idx];
                    if a == 0.0 {
                        return;
                    }
                    let (h, w) = spec.levels[li];
                    if let Some(taps) = bilinear_taps(h, w, u, v) {
                        let dst = &mut out[qi * dim + mi * hd..qi * dim + (mi + 1) * hd];
                        for (cell, tw_) in taps {
                            let wt = a * tw_;
                            if wt == 0.0 {
                                continue;
                            }
                            let src = &vals[li].data[cell * dim + mi * hd..cell * dim + (mi + 1) * hd];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wt * s;
                            }
                        }
                    }
                },
            );
        }
        let ng = values.iter().any(|v| self.ng(*v))
            || self.ng(refs)
            || offsets.is_some_and(|o| self.ng(o))
            || self.ng(weights);
        let t = Tensor::new(vec![q, dim], out);
        self.push(
            t,
            Op::Deform {
                values: values.to_vec(),
                refs,
                offsets,
                weights,
                spec: Box::new(spec),
            },
            ng,
        )
    }

    /// Mean binary cross-entropy with logits; positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, x: Var, target: Vec<f64>, pos_weight: f64) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.numel(), target.len(), "bce size");
        let n = tx.numel() as f64;
        let mut s = 0.0;
        for (z, t) in tx.data.iter().zip(&target) {
            s += pos_weight * t * softplus(-z) + (1.0 - t) * softplus(*z);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(s / n),
            Op::BceLogits {
                x,
                target: Rc::new(target),
                pos_weight,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node; returns gradients for every parameter in the graph.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    out.grads[pid] = Some(Tensor::new(self.params.get(ParamId(pid)).shape.clone(), g));
                }
            }
        }
        out
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Reshape(x) | Op::AddConst(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = self.value(*row).numel();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulConst(a, c) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * c[i];
                }
            }),
            Op::ScaleCols(a, c) => {
                let n = c.len();
                acc(*a, &mut |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i] * c[i % n];
                    }
                })
            }
            Op::Scale(a, k) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * k;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                let m = ta.rows();
                let n = tb.shape[1];
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |d| {
                    gemm(m, n, k, g, n as isize, 1, &tb.data, 1, n as isize, d, 1.0)
                });
                acc(*b, &mut |d| {
                    gemm(k, m, n, &ta.data, 1, k as isize, g, n as isize, 1, d, 1.0)
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                let m = ta.rows();
                let n = tb.rows();
                // C = A Bᵀ: dA = G · B, dB = Gᵀ · A
                acc(*a, &mut |d| {
                    gemm(m, n, k, g, n as isize, 1, &tb.data, k as isize, 1, d, 1.0)
                });
                acc(*b, &mut |d| {
                    gemm(n, m, k, g, 1, n as isize, &ta.data, k as isize, 1, d, 1.0)
                });
            }
            Op::Relu(a) => {
                let va = &self.value(*a).data;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Softplus(a) => {
                let va = &self.value(*a).data;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(va[i]);
                    }
                })
            }
            Op::Abs(a) => {
                let va = &self.value(*a).data;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i].signum() * (va[i] != 0.0) as u8 as f64;
                    }
                })
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let n = node.value.cols();
                acc(*a, &mut |d| {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            d[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let gam = &self.value(*gamma).data;
                let rows = tx.rows();
                let mut dx = vec![0.0; tx.numel()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let xs = &tx.data[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mean = xs.iter().sum::<f64>() / n as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..n).map(|j| gs[j] * gam[j]).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dg[j] += gs[j] * xhat[j];
                        db[j] += gs[j];
                        dx[r * n + j] = inv / n as f64 * (n as f64 * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*gamma, &mut |d| add_into(d, &dg));
                acc(*beta, &mut |d| add_into(d, &db));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let k = self.value(*p).numel();
                    acc(*p, &mut |d| add_into(d, &g[off..off + k]));
                    off += k;
                }
            }
            Op::RowMatConst(a, c, n) => {
                let n = *n;
                let ta = self.value(*a);
                let m = ta.cols();
                acc(*a, &mut |d| {
                    for r in 0..ta.rows() {
                        for i in 0..m {
                            let row = &c[(r * m + i) * n..(r * m + i + 1) * n];
                            d[r * m + i] += row.iter().zip(&g[r * n..(r + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                })
            }
            Op::Narrow { x, start, len } => {
                let n = self.value(*x).cols();
                let rows = node.value.rows();
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                })
            }
            Op::SelectRows(x, idx) => {
                let n = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                })
            }
            Op::Conv2d { x, w, b, spec } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let ckk = spec.in_ch * spec.k * spec.k;
                let npix = spec.oh * spec.ow;
                let o = spec.out_ch;
                acc(*b, &mut |d| {
                    for (oc, chunk) in g.chunks(npix).enumerate() {
                        d[oc] += chunk.iter().sum::<f64>();
                    }
                });
                if self.nodes[w.0].needs_grad {
                    let col = im2col(&tx.data, spec);
                    acc(*w, &mut |d| {
                        // dW[o, ckk] = G[o, npix] · colᵀ
                        gemm(o, npix, ckk, g, npix as isize, 1, &col, 1, npix as isize, d, 1.0)
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcol = vec![0.0; ckk * npix];
                    // dcol[ckk, npix] = Wᵀ · G
                    gemm(
                        ckk,
                        o,
                        npix,
                        &tw.data,
                        1,
                        ckk as isize,
                        g,
                        npix as isize,
                        1,
                        &mut dcol,
                        0.0,
                    );
                    acc(*x, &mut |d| col2im_add(&dcol, spec, d));
                }
            }
            Op::ChwToHwc { x, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for p in 0..h * w {
                            d[ch * h * w + p] += g[p * c + ch];
                        }
                    }
                })
            }
            Op::Project { pts, rig } => {
                let tp = self.value(*pts);
                let r = rig.ground_to_camera.matrix();
                let (fx, fy, skew) = (rig.fx(), rig.fy(), rig.intrinsics[(0, 1)]);
                acc(*pts, &mut |d| {
                    for (i, p) in tp.data.chunks(3).enumerate() {
                        let c = rig.to_camera([p[0], p[1], p[2]]);
                        if c[2] <= MIN_DEPTH {
                            continue;
                        }
                        let (gu, gv) = (g[2 * i], g[2 * i + 1]);
                        let iz = 1.0 / c[2];
                        // u = fx·X/Z + s·Y/Z + cx ; v = fy·Y/Z + cy
                        let du_dc = [fx * iz, skew * iz, -(fx * c[0] + skew * c[1]) * iz * iz];
                        let dv_dc = [0.0, fy * iz, -fy * c[1] * iz * iz];
                        let dc = [
                            gu * du_dc[0] + gv * dv_dc[0],
                            gu * du_dc[1] + gv * dv_dc[1],
                            gu * du_dc[2] + gv * dv_dc[2],
                        ];
                        for j in 0..3 {
                            d[3 * i + j] += dc[0] * r[(0, j)] + dc[1] * r[(1, j)] + dc[2] * r[(2, j)];
                        }
                    }
                })
            }
            Op::SinEmbed { x, freqs } => {
                let tx = self.value(*x);
                let f = freqs.len();
                acc(*x, &mut |d| {
                    for (i, v) in tx.data.iter().enumerate() {
                        let mut s = 0.0;
                        for (j, w) in freqs.iter().enumerate() {
                            let (sn, cs) = (v * w).sin_cos();
                            let base = i * 2 * f + 2 * j;
                            s += g[base] * w * cs - g[base + 1] * w * sn;
                        }
                        d[i] += s;
                    }
                })
            }
            Op::Deform {
                values,
                refs,
                offsets,
                weights,
                spec,
            } => self.backward_deform(values, *refs, *offsets, *weights, spec, g, grads),
            Op::BceLogits { x, target, pos_weight } => {
                let tx = self.value(*x);
                let n = tx.numel() as f64;
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let z = tx.data[i];
                        let t = target[i];
                        // d/dz [pw·t·softplus(-z) + (1-t)·softplus(z)]
                        let dz = -pos_weight * t * sigmoid(-z) + (1.0 - t) * sigmoid(z);
                        d[i] += g[0] * dz / n;
                    }
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_deform(
        &self,
        values: &[Var],
        refs: Var,
        offsets: Option<Var>,
        weights: Var,
        spec: &DeformSpec,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let dim = spec.dim;
        let hd = dim / spec.heads;
        let vals: Vec<&Tensor> = values.iter().map(|v| self.value(*v)).collect();
        let tw = self.value(weights);
        let tr = self.value(refs);
        let to = offsets.map(|o| self.value(o));
        let need_vals: Vec<bool> = values.iter().map(|v| self.ng(*v)).collect();
        let need_loc = self.ng(refs) || offsets.is_some_and(|o| self.ng(o));
        let need_w = self.ng(weights);
        let mut dvals: Vec<Vec<f64>> = vals
            .iter()
            .zip(&need_vals)
            .map(|(t, n)| if *n { vec![0.0; t.numel()] } else { Vec::new() })
            .collect();
        let mut dloc = if need_loc {
            vec![0.0; tw.numel() * 2]
        } else {
            Vec::new()
        };
        let mut dw = if need_w { vec![0.0; tw.numel()] } else { Vec::new() };

        for_each_sample(
            spec,
            &tr.data,
            to.map(|t| t.data.as_slice()),
            |qi, mi, li, idx, u, v| {
                let (h, w) = spec.levels[li];
                let Some(taps) = bilinear_taps(h, w, u, v) else { return };
                let a = tw.data[idx];
                let go = &g[qi * dim + mi * hd..qi * dim + (mi + 1) * hd];
                let val = &vals[li].data;
                let cell = |c: usize| &val[c * dim + mi * hd..c * dim + (mi + 1) * hd];
                if need_w {
                    let mut s = 0.0;
                    for (c, tw_) in taps {
                        if tw_ != 0.0 {
                            s += tw_ * cell(c).iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    dw[idx] += s;
                }
                if a == 0.0 {
                    return;
                }
                if need_vals[li] {
                    let dv = &mut dvals[li];
                    for (c, tw_) in taps {
                        let wt = a * tw_;
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = &mut dv[c * dim + mi * hd..c * dim + (mi + 1) * hd];
                        for (d, y) in dst.iter_mut().zip(go) {
                            *d += wt * y;
                        }
                    }
                }
                if need_loc {
                    // taps order: (y0,x0), (y0,x1), (y1,x0), (y1,x1)
                    let fx = u - u.floor().min((w - 1) as f64);
                    let fy = v - v.floor().min((h - 1) as f64);
                    let dot = |c: usize| cell(c).iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
                    let (d00, d01, d10, d11) = (dot(taps[0].0), dot(taps[1].0), dot(taps[2].0), dot(taps[3].0));
                    // Collapsed taps at the right/bottom border contribute zero slope.
                    let du = if taps[1].0 != taps[0].0 {
                        (1.0 - fy) * (d01 - d00) + fy * (d11 - d10)
                    } else {
                        0.0
                    };
                    let dv = if taps[2].0 != taps[0].0 {
                        (1.0 - fx) * (d10 - d00) + fx * (d11 - d01)
                    } else {
                        0.0
                    };
                    dloc[2 * idx] += a * du;
                    dloc[2 * idx + 1] += a * dv;
                }
            },
        );

        let mut acc = |v: Var, src: &[f64]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            add_into(slot, src);
        };
        for (i, v) in values.iter().enumerate() {
            if need_vals[i] {
                acc(*v, &dvals[i]);
            }
        }
        if need_w {
            acc(weights, &dw);
        }
        if need_loc {
            if let Some(o) = offsets {
                acc(o, &dloc);
            }
            if self.ng(refs) {
                // refs [Q, L, N, 2] receive the sum over heads and samples.
                let (q, m, l, n, k) = (spec.queries, spec.heads, spec.levels.len(), spec.points, spec.samples);
                let mut dr = vec![0.0; q * l * n * 2];
                for qi in 0..q {
                    for mi in 0..m {
                        for li in 0..l {
                            for ni in 0..n {
                                for ki in 0..k {
                                    let idx = (((qi * m + mi) * l + li) * n + ni) * k + ki;
                                    let r = ((qi * l + li) * n + ni) * 2;
                                    dr[r] += dloc[2 * idx];
                                    dr[r + 1] += dloc[2 * idx + 1];
                                }
                            }
                        }
                    }
                }
                acc(refs, &dr);
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
const OFF_IMAGE: f64 = -1.0e6;

/// Visits every (query, head, level, point, sample) with its flat weight index and location.
fn for_each_sample(
    spec: &DeformSpec,
    refs: &[f64],
    offsets: Option<&[f64]>,
    mut f: impl FnMut(usize, usize, usize, usize, f64, f64),
) {
    let (q, m, l, n, k) = (spec.queries, spec.heads, spec.levels.len(), spec.points, spec.samples);
    for qi in 0..q {
        for mi in 0..m {
            for li in 0..l {
                for ni in 0..n {
                    let r = ((qi * l + li) * n + ni) * 2;
                    let (ru, rv) = (refs[r], refs[r + 1]);
                    for ki in 0..k {
                        let idx = (((qi * m + mi) * l + li) * n + ni) * k + ki;
                        let (du, dv) = match offsets {
                            Some(o) => (o[2 * idx], o[2 * idx + 1]),
                            None => (0.0, 0.0),
                        };
                        f(qi, mi, li, idx, ru + du, rv + dv);
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], s: &ConvSpec) -> Vec<f64> {
    let npix = s.oh * s.ow;
    let mut col = vec![0.0; s.in_ch * s.k * s.k * npix];
    for c in 0..s.in_ch {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..s.oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &x[(c * s.h + iy as usize) * s.w..(c * s.h + iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[oy * s.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(col: &[f64], s: &ConvSpec, dx: &mut [f64]) {
    let npix = s.oh * s.ow;
    for c in 0..s.in_ch {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..s.oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = (c * s.h + iy as usize) * s.w;
                    for ox in 0..s.ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dx[base + ix as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
