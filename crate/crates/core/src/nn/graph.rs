//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; `backward`
//! walks the tape in reverse and returns gradients for every parameter of the
//! borrowed [`ParamStore`]. Values are 2-D row-major unless stated otherwise.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, T, T),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant; never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[n, m]);
        T::gemm(
            n,
            k,
            m,
            T::one(),
            &self.value(a).data,
            k as isize,
            1,
            &self.value(b).data,
            m as isize,
            1,
            T::zero(),
            &mut out.data,
            m as isize,
            1,
        );
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `a [n, m] + b [m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let m = *sa.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != m {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let mut out = self.value(a).clone();
        let bias = &self.value(b).data;
        for row in out.data.chunks_mut(m) {
            for (x, &bj) in row.iter_mut().zip(bias) {
                *x += bj;
            }
        }
        Ok(self.push(Op::AddBias(a, b), out, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err(name, &va.shape, &vb.shape));
        }
        Ok(Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "min", |x, y| if y < x { y } else { x })?;
        Ok(self.push(Op::Min(a, b), out, &[a, b]))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "max", |x, y| if y > x { y } else { x })?;
        Ok(self.push(Op::Max(a, b), out, &[a, b]))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.unary(a, |x| x * s);
        self.push(Op::Scale(a, s), out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.unary(a, |x| x + s);
        self.push(Op::AddScalar(a), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.tanh());
        self.push(Op::Tanh(a), out, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(Op::Sigmoid(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.exp());
        self.push(Op::Exp(a), out, &[a])
    }

    /// Elementwise clamp; the gradient flows only where `lo <= a <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.unary(a, |x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), out, &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ((na, ka), (nb, kb)) = (va.dims2(), vb.dims2());
        if na != nb {
            return Err(shape_err("concat_cols", &va.shape, &vb.shape));
        }
        let mut data = Vec::with_capacity(na * (ka + kb));
        for r in 0..na {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![na, ka + kb], data);
        Ok(self.push(Op::ConcatCols(a, b), out, &[a, b]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, k) = va.dims2();
        if start + len > k {
            return Err(shape_err("slice_cols", &va.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], data);
        Ok(self.push(Op::SliceCols(a, start), out, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, k) = va.dims2();
        if start + len > n {
            return Err(shape_err("slice_rows", &va.shape, &[start, len]));
        }
        let out = Tensor::new(vec![len, k], va.data[start * k..(start + len) * k].to_vec());
        Ok(self.push(Op::SliceRows(a, start), out, &[a]))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let k = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.dims2().1 != k {
                return Err(shape_err("stack_rows", &self.value(parts[0]).shape, &v.shape));
            }
            data.extend_from_slice(&v.data);
        }
        let n = data.len() / k;
        let out = Tensor::new(vec![n, k], data);
        Ok(self.push(Op::StackRows(parts.to_vec()), out, parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(shape_err("reshape", &va.shape, shape));
        }
        let out = Tensor::new(shape.to_vec(), va.data.clone());
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    /// Same-padded stride-1 convolution. `x` is `[n, c*h*w]`, `k` is
    /// `[o, c*kh*kw]` (any shape with that length), `b` has `o` entries; the
    /// result is `[n, o*h*w]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(b));
        let (n, xin) = vx.dims2();
        let (patch, plane, o) = (geom.patch(), geom.plane(), geom.out_channels);
        if geom.kernel % 2 == 0 || xin != geom.channels * plane {
            return Err(shape_err("conv2d input", &vx.shape, &[geom.channels, geom.height, geom.width]));
        }
        if vk.len() != o * patch || vb.len() != o {
            return Err(shape_err("conv2d kernel", &vk.shape, &[o, patch]));
        }
        let cols = im2col(&vx.data, n, geom);
        let total = n * plane;
        let mut tmp = vec![T::zero(); o * total];
        T::gemm(
            o,
            patch,
            total,
            T::one(),
            &vk.data,
            patch as isize,
            1,
            &cols,
            total as isize,
            1,
            T::zero(),
            &mut tmp,
            total as isize,
            1,
        );
        let mut out = vec![T::zero(); n * o * plane];
        for s in 0..n {
            for oc in 0..o {
                let bias = vb.data[oc];
                let src = &tmp[oc * total + s * plane..oc * total + (s + 1) * plane];
                let dst = &mut out[(s * o + oc) * plane..(s * o + oc + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        let out = Tensor::new(vec![n, o * plane], out);
        Ok(self.push(Op::Conv2d { x, k, b, geom, cols }, out, &[x, k, b]))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, k) = va.dims2();
        let mut data = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = va.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::new(vec![n, k], data);
        self.push(Op::LogSoftmax(a), out, &[a])
    }

    /// Picks `a[r, idx[r]]` for every row; result `[n]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n, k) = va.dims2();
        if idx.len() != n || idx.iter().any(|&i| i >= k) {
            return Err(shape_err("gather", &va.shape, &[idx.len()]));
        }
        let out = Tensor::new(vec![n], idx.iter().enumerate().map(|(r, &i)| va.data[r * k + i]).collect());
        Ok(self.push(Op::Gather(a, idx.to_vec()), out, &[a]))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, _) = va.dims2();
        let out = Tensor::new(vec![n], (0..n).map(|r| va.row(r).iter().copied().sum()).collect());
        self.push(Op::SumRows(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data.iter().copied().sum::<T>() / T::from_f64(va.len() as f64);
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Gradients of a scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &self.value(loss).shape, &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape.clone(), vec![T::one()]));
        let mut out = self.params.zeros_like();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = || -> &Tensor<T> { node.value.as_ref().unwrap() };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.0[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k) = (va.shape[0], va.shape[1]);
                    let m = vb.shape[1];
                    if self.nodes[a.0].needs_grad {
                        let mut da = Tensor::zeros(&[n, k]);
                        // dA = dC * B^T
                        T::gemm(n, m, k, T::one(), &g.data, m as isize, 1, &vb.data, 1, m as isize, T::zero(), &mut da.data, k as isize, 1);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = Tensor::zeros(&[k, m]);
                        // dB = A^T * dC
                        T::gemm(k, n, m, T::one(), &va.data, 1, k as isize, &g.data, m as isize, 1, T::zero(), &mut db.data, m as isize, 1);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        let vb = self.value(*b);
                        let m = vb.len();
                        let mut db = vec![T::zero(); m];
                        for row in g.data.chunks(m) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::new(vb.shape.clone(), db));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, map(&g, |x| -x));
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        self.acc(&mut grads, *a, zip(&g, vb, |d, y| d * y));
                    }
                    if self.nodes[b.0].needs_grad {
                        self.acc(&mut grads, *b, zip(&g, va, |d, x| d * x));
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // Ties route to `a`.
                    let pick_b: Vec<bool> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(&x, &y)| if is_min { y < x } else { y > x })
                        .collect();
                    let ga = Tensor::new(g.shape.clone(), g.data.iter().zip(&pick_b).map(|(&d, &p)| if p { T::zero() } else { d }).collect());
                    let gb = Tensor::new(g.shape.clone(), g.data.iter().zip(&pick_b).map(|(&d, &p)| if p { d } else { T::zero() }).collect());
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, map(&g, |d| d * s));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape.clone();
                    self.acc(&mut grads, *a, Tensor::new(shape, g.data));
                }
                Op::Relu(a) => {
                    let ga = zip(&g, y(), |d, v| if v > T::zero() { d } else { T::zero() });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip(&g, y(), |d, v| d * (T::one() - v * v));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip(&g, y(), |d, v| d * v * (T::one() - v));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip(&g, y(), |d, v| d * v);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = zip(&g, self.value(*a), |d, x| if x >= lo && x <= hi { d } else { T::zero() });
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ka = self.value(*a).dims2().1;
                    let kb = self.value(*b).dims2().1;
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for row in g.data.chunks(ka + kb) {
                        da.extend_from_slice(&row[..ka]);
                        db.extend_from_slice(&row[ka..]);
                    }
                    let (sa, sb) = (self.value(*a).shape.clone(), self.value(*b).shape.clone());
                    self.acc(&mut grads, *a, Tensor::new(sa, da));
                    self.acc(&mut grads, *b, Tensor::new(sb, db));
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let (n, k) = va.dims2();
                    let len = g.dims2().1;
                    let mut da = Tensor::zeros(&va.shape);
                    for r in 0..n {
                        da.data[r * k + start..r * k + start + len].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let va = self.value(*a);
                    let k = va.dims2().1;
                    let mut da = Tensor::zeros(&va.shape);
                    da.data[start * k..start * k + g.len()].copy_from_slice(&g.data);
                    self.acc(&mut grads, *a, da);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let vp = self.value(*p);
                        let len = vp.len();
                        let part = Tensor::new(vp.shape.clone(), g.data[offset..offset + len].to_vec());
                        offset += len;
                        self.acc(&mut grads, *p, part);
                    }
                }
                Op::Conv2d { x, k, b, geom, cols } => {
                    let (patch, plane, o) = (geom.patch(), geom.plane(), geom.out_channels);
                    let n = self.value(*x).dims2().0;
                    let total = n * plane;
                    // Regroup dOut from [n][o][plane] to [o][n*plane].
                    let mut gr = vec![T::zero(); o * total];
                    for s in 0..n {
                        for oc in 0..o {
                            gr[oc * total + s * plane..oc * total + (s + 1) * plane]
                                .copy_from_slice(&g.data[(s * o + oc) * plane..(s * o + oc + 1) * plane]);
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<T> = (0..o).map(|oc| gr[oc * total..(oc + 1) * total].iter().copied().sum()).collect();
                        let shape = self.value(*b).shape.clone();
                        self.acc(&mut grads, *b, Tensor::new(shape, db));
                    }
                    if self.nodes[k.0].needs_grad {
                        let mut dk = vec![T::zero(); o * patch];
                        T::gemm(o, total, patch, T::one(), &gr, total as isize, 1, cols, 1, total as isize, T::zero(), &mut dk, patch as isize, 1);
                        let shape = self.value(*k).shape.clone();
                        self.acc(&mut grads, *k, Tensor::new(shape, dk));
                    }
                    if self.nodes[x.0].needs_grad {
                        let vk = self.value(*k);
                        let mut dcols = vec![T::zero(); patch * total];
                        T::gemm(patch, o, total, T::one(), &vk.data, 1, patch as isize, &gr, total as isize, 1, T::zero(), &mut dcols, total as isize, 1);
                        let dx = col2im(&dcols, n, *geom);
                        let shape = self.value(*x).shape.clone();
                        self.acc(&mut grads, *x, Tensor::new(shape, dx));
                    }
                }
                Op::LogSoftmax(a) => {
                    let yv = y();
                    let (n, k) = yv.dims2();
                    let mut da = Vec::with_capacity(n * k);
                    for r in 0..n {
                        let gs: T = g.row(r).iter().copied().sum();
                        da.extend(g.row(r).iter().zip(yv.row(r)).map(|(&d, &l)| d - l.exp() * gs));
                    }
                    let shape = self.value(*a).shape.clone();
                    self.acc(&mut grads, *a, Tensor::new(shape, da));
                }
                Op::Gather(a, idx) => {
                    let va = self.value(*a);
                    let k = va.dims2().1;
                    let mut da = Tensor::zeros(&va.shape);
                    for (r, &i) in idx.iter().enumerate() {
                        da.data[r * k + i] = g.data[r];
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::SumRows(a) => {
                    let va = self.value(*a);
                    let k = va.dims2().1;
                    let da = Tensor::new(va.shape.clone(), (0..va.len()).map(|i| g.data[i / k]).collect());
                    self.acc(&mut grads, *a, da);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let va = self.value(*a);
                    let d = if matches!(node.op, Op::Mean(_)) {
                        g.data[0] / T::from_f64(va.len() as f64)
                    } else {
                        g.data[0]
                    };
                    self.acc(&mut grads, *a, Tensor::full(&va.shape, d));
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: v.shape.clone(),
        data: g.data.iter().zip(&v.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

/// Columns `[c*kh*kw, n*h*w]`; out-of-bounds taps read zero.
fn im2col<T: Scalar>(x: &[T], n: usize, geom: ConvGeom) -> Vec<T> {
    let (c, h, w, kk) = (geom.channels, geom.height, geom.width, geom.kernel);
    let pad = (kk / 2) as isize;
    let plane = h * w;
    let total = n * plane;
    let mut cols = vec![T::zero(); geom.patch() * total];
    for ch in 0..c {
        for ki in 0..kk {
            for kj in 0..kk {
                let row = (ch * kk + ki) * kk + kj;
                let dst = &mut cols[row * total..(row + 1) * total];
                for s in 0..n {
                    let src = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    for i in 0..h {
                        let si = i as isize + ki as isize - pad;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        // Output columns j whose source column j + kj - pad is in range.
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((w as isize) + pad - kj as isize).min(w as isize) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + kj as isize - pad) as usize;
                            let base = s * plane + i * w;
                            let srow = si as usize * w;
                            dst[base + lo..base + hi].copy_from_slice(&src[srow + s0..srow + s0 + hi - lo]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], n: usize, geom: ConvGeom) -> Vec<T> {
    let (c, h, w, kk) = (geom.channels, geom.height, geom.width, geom.kernel);
    let pad = (kk / 2) as isize;
    let plane = h * w;
    let total = n * plane;
    let mut x = vec![T::zero(); n * c * plane];
    for ch in 0..c {
        for ki in 0..kk {
            for kj in 0..kk {
                let row = (ch * kk + ki) * kk + kj;
                let src = &cols[row * total..(row + 1) * total];
                for s in 0..n {
                    let dst = &mut x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    for i in 0..h {
                        let si = i as isize + ki as isize - pad;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((w as isize) + pad - kj as isize).min(w as isize) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + kj as isize - pad) as usize;
                            let base = s * plane + i * w;
                            let drow = si as usize * w;
                            for (d, &v) in dst[drow + s0..drow + s0 + hi - lo].iter_mut().zip(&src[base + lo..base + hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
