//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products. A tape records
//! exactly one forward pass and may be differentiated once.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, BilinearTap, CompositeGrads, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Additive logit used for masked-out softmax entries.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        col: Vec<T>,
    },
    Upsample2x(Var),
    Bilinear {
        map: Var,
        uv: Var,
        taps: Vec<Option<BilinearTap<T>>>,
    },
    GroupWeightedSum(Var, Var),
    PosEncode(Var, usize),
    Composite {
        sigma: Var,
        color: Var,
        t: Var,
        far: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    differentiated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(mismatch(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let ng = self.needs(&[a, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(a, bias), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::c(scale), T::c(shift));
        self.unary(a, |x| x * s + c, Op::Affine(a, s))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::c(lo), T::c(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, l, h))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
            .expect("unmasked softmax has no shape constraints")
    }

    /// Softmax along the last axis with entries where `mask` is false forced to 0.
    /// A row with no valid entry yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(mismatch("masked_softmax", self.shape(a), &[mask.len()]));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols().max(1);
        let rows = x.len() / cols;
        let masked = T::c(MASKED_LOGIT);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xs = &x.data()[r * cols..(r + 1) * cols];
            let valid = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            if !(0..cols).any(valid) {
                continue;
            }
            let logit = |j: usize| if valid(j) { xs[j] } else { masked };
            let mx = (0..cols).map(logit).fold(T::neg_infinity(), T::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = (logit(j) - mx).exp();
                total = total + *oj;
            }
            for oj in o.iter_mut() {
                *oj = *oj / total;
            }
        }
        let shape = x.shape().to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), ng))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(mismatch("concat", &[], &[]))?;
        let (rows, _) = self.mat_dims(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat")?;
            if r != rows {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + wd]
                    .copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(mismatch("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::Slice(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// 3x3 zero-padded convolution of an `[H,W,Cin]` image with a
    /// `[9*Cin, Cout]` kernel and `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || !(stride == 1 || stride == 2) {
            return Err(mismatch("conv2d", &s, self.shape(weight)));
        }
        let (wr, cout) = self.mat_dims(weight, "conv2d")?;
        let geom = ConvGeom {
            h: s[0],
            w: s[1],
            cin: s[2],
            cout,
            stride,
        };
        if wr != geom.patch() || self.value(bias).len() != cout {
            return Err(mismatch("conv2d", &s, self.shape(weight)));
        }
        let col = kernels::im2col(self.value(input).data(), geom);
        let rows = geom.out_h() * geom.out_w();
        let mut out = kernels::matmul(&col, self.value(weight).data(), rows, geom.patch(), cout);
        let b = self.value(bias).data();
        for r in 0..rows {
            for (o, &bv) in out[r * cout..(r + 1) * cout].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let ng = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![geom.out_h(), geom.out_w(), cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                col,
            },
            ng,
        ))
    }

    /// Nearest-neighbor 2x upsampling of an `[H,W,C]` image.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", &s, &[0, 0, 0]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let si = ((y / 2) * w + x / 2) * c;
                let di = (y * 2 * w + x) * c;
                out[di..di + c].copy_from_slice(&src[si..si + c]);
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![2 * h, 2 * w, c], out)?,
            Op::Upsample2x(a),
            ng,
        ))
    }

    /// Bilinear lookup of an `[H,W,C]` map at `[N,2]` continuous pixel
    /// coordinates `(x, y)`. Out-of-range rows produce zeros and `false`.
    pub fn bilinear_sample(&mut self, map: Var, uv: Var) -> Result<(Var, Vec<bool>)> {
        let s = self.shape(map).to_vec();
        let (n, two) = self.mat_dims(uv, "bilinear_sample")?;
        if s.len() != 3 || two != 2 {
            return Err(mismatch("bilinear_sample", &s, self.shape(uv)));
        }
        let (out, taps) = kernels::bilinear_forward(
            self.value(map).data(),
            s[0],
            s[1],
            s[2],
            self.value(uv).data(),
        );
        let valid = taps.iter().map(Option::is_some).collect();
        let ng = self.needs(&[map, uv]);
        let v = self.push(
            Tensor::new(vec![n, s[2]], out)?,
            Op::Bilinear { map, uv, taps },
            ng,
        );
        Ok((v, valid))
    }

    /// `out[n,:] = sum_k weights[n,k] * values[n*K+k,:]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(weights, "group_weighted_sum")?;
        let (nk, c) = self.mat_dims(values, "group_weighted_sum")?;
        if nk != n * k {
            return Err(mismatch(
                "group_weighted_sum",
                self.shape(weights),
                self.shape(values),
            ));
        }
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let wij = w[i * k + j];
                let row = &v[(i * k + j) * c..(i * k + j + 1) * c];
                for (oc, &vc) in o.iter_mut().zip(row) {
                    *oc = *oc + wij * vc;
                }
            }
        }
        let ng = self.needs(&[weights, values]);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::GroupWeightedSum(weights, values),
            ng,
        ))
    }

    /// Frequency encoding of each `[N,D]` row into `[N, D*(1+2L)]`.
    pub fn pos_encode(&mut self, a: Var, levels: usize) -> Result<Var> {
        let (n, d) = self.mat_dims(a, "pos_encode")?;
        let out = kernels::pos_encode(self.value(a).data(), d, levels);
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, d * (1 + 2 * levels)], out)?,
            Op::PosEncode(a, levels),
            ng,
        ))
    }

    /// Volume compositing. `sigma` and `t` are `[R,S]`, `color` is `[R*S,3]`,
    /// `far` has one entry per ray. Output is `[R,5]` = `(r, g, b, alpha, depth)`.
    pub fn composite(&mut self, sigma: Var, color: Var, t: Var, far: Vec<T>) -> Result<Var> {
        let (r, s) = self.mat_dims(sigma, "composite")?;
        if self.shape(t) != [r, s] || self.shape(color) != [r * s, 3] || far.len() != r {
            return Err(mismatch("composite", self.shape(sigma), self.shape(color)));
        }
        let (out, weights) = kernels::composite_forward(
            self.value(sigma).data(),
            self.value(color).data(),
            self.value(t).data(),
            &far,
            s,
        );
        let ng = self.needs(&[sigma, color, t]);
        Ok(self.push(
            Tensor::new(vec![r, 5], out)?,
            Op::Composite {
                sigma,
                color,
                t,
                far,
                weights,
            },
            ng,
        ))
    }

    /// Per-sample compositing weights recorded by a [`Tape::composite`] node.
    pub fn composite_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Composite { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Differentiates a scalar `loss` with respect to every node that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.backward_with(loss, Tensor::full(shape, T::one()))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if self.differentiated {
            return Err(AutodiffError::BackwardTwice);
        }
        if seed.len() != self.value(output).len() {
            return Err(mismatch("backward", self.shape(output), seed.shape()));
        }
        self.differentiated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = seed.reshape(self.shape(output).to_vec())?;
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: &Var| nodes[v.0].value.data();
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(d) = slot(grads, nodes, *a) {
                    kernels::matmul_backward(val(a), val(b), gd, m, k, n, Some(d), None);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    kernels::matmul_backward(val(a), val(b), gd, m, k, n, None, Some(d));
                }
            }
            Op::AddBias(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    let n = d.len();
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    add_into(d, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    zip_into(d, gd, |_, gi| -gi);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let bv = val(b);
                    zip_into(d, gd, |j, gi| gi * bv[j]);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    let av = val(a);
                    zip_into(d, gd, |j, gi| gi * av[j]);
                }
            }
            Op::Affine(a, s) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    zip_into(d, gd, |_, gi| gi * *s);
                }
            }
            Op::Relu(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let x = val(a);
                    zip_into(d, gd, |j, gi| if x[j] > T::zero() { gi } else { T::zero() });
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = nodes[i].value.data();
                    zip_into(d, gd, |j, gi| gi * y[j] * (T::one() - y[j]));
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = nodes[i].value.data();
                    zip_into(d, gd, |j, gi| gi * (T::one() - y[j] * y[j]));
                }
            }
            Op::Exp(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = nodes[i].value.data();
                    zip_into(d, gd, |j, gi| gi * y[j]);
                }
            }
            Op::Softplus(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let x = val(a);
                    zip_into(d, gd, |j, gi| gi * sigmoid(x[j]));
                }
            }
            Op::Ln(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let x = val(a);
                    zip_into(d, gd, |j, gi| gi / x[j]);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let x = val(a);
                    zip_into(d, gd, |j, gi| {
                        if x[j] > *lo && x[j] < *hi {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = &nodes[i].value;
                    let cols = y.cols().max(1);
                    for ((ys, gs), ds) in y
                        .data()
                        .chunks(cols)
                        .zip(gd.chunks(cols))
                        .zip(d.chunks_mut(cols))
                    {
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            ds[j] = ds[j] + ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let wd = nodes[p.0].value.shape()[1];
                    if let Some(d) = slot(grads, nodes, *p) {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * wd..(r + 1) * wd],
                                &gd[r * total + offset..r * total + offset + wd],
                            );
                        }
                    }
                    offset += wd;
                }
            }
            Op::Slice(a, start) => {
                let cols = nodes[a.0].value.shape()[1];
                let len = g.cols();
                if let Some(d) = slot(grads, nodes, *a) {
                    for r in 0..g.rows() {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &gd[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, gd);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let gs = g.item();
                    d.iter_mut().for_each(|x| *x = *x + gs);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                col,
            } => {
                let rows = geom.out_h() * geom.out_w();
                let p = geom.patch();
                let cout = geom.cout;
                if let Some(d) = slot(grads, nodes, *weight) {
                    kernels::matmul_backward(col, val(weight), gd, rows, p, cout, None, Some(d));
                }
                if let Some(d) = slot(grads, nodes, *bias) {
                    for row in gd.chunks(cout) {
                        add_into(d, row);
                    }
                }
                if let Some(d) = slot(grads, nodes, *input) {
                    let mut dcol = vec![T::zero(); rows * p];
                    kernels::matmul_backward(
                        col,
                        val(weight),
                        gd,
                        rows,
                        p,
                        cout,
                        Some(&mut dcol),
                        None,
                    );
                    kernels::col2im(&dcol, *geom, d);
                }
            }
            Op::Upsample2x(a) => {
                let s = nodes[a.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                if let Some(d) = slot(grads, nodes, *a) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let di = ((y / 2) * w + x / 2) * c;
                            let si = (y * 2 * w + x) * c;
                            add_into(&mut d[di..di + c], &gd[si..si + c]);
                        }
                    }
                }
            }
            Op::Bilinear { map, uv, taps } => {
                let s = nodes[map.0].value.shape();
                let (w, c) = (s[1], s[2]);
                if let Some(d) = slot(grads, nodes, *map) {
                    kernels::bilinear_backward(val(map), w, c, taps, gd, Some(d), None);
                }
                if let Some(d) = slot(grads, nodes, *uv) {
                    kernels::bilinear_backward(val(map), w, c, taps, gd, None, Some(d));
                }
            }
            Op::GroupWeightedSum(weights, values) => {
                let k = nodes[weights.0].value.shape()[1];
                let c = nodes[values.0].value.shape()[1];
                if let Some(d) = slot(grads, nodes, *weights) {
                    let v = val(values);
                    for (j, dj) in d.iter_mut().enumerate() {
                        let gi = &gd[(j / k) * c..(j / k + 1) * c];
                        let row = &v[j * c..(j + 1) * c];
                        *dj = *dj + gi.iter().zip(row).map(|(&a, &b)| a * b).sum();
                    }
                }
                if let Some(d) = slot(grads, nodes, *values) {
                    let w = val(weights);
                    for (j, row) in d.chunks_mut(c).enumerate() {
                        let gi = &gd[(j / k) * c..(j / k + 1) * c];
                        for (r, &gc) in row.iter_mut().zip(gi) {
                            *r = *r + w[j] * gc;
                        }
                    }
                }
            }
            Op::PosEncode(a, levels) => {
                let dim = nodes[a.0].value.shape()[1];
                if let Some(d) = slot(grads, nodes, *a) {
                    kernels::pos_encode_backward(val(a), dim, *levels, gd, d);
                }
            }
            Op::Composite {
                sigma,
                color,
                t,
                far,
                weights,
            } => {
                let s = nodes[sigma.0].value.shape()[1];
                // Three distinct slots are needed at once; take them out temporarily.
                let mut take = |v: Var| -> Option<Tensor<T>> {
                    slot(grads, nodes, v)?;
                    grads[v.0].take()
                };
                let mut gs = take(*sigma);
                let mut gc = take(*color);
                let mut gt = take(*t);
                kernels::composite_backward(
                    val(sigma),
                    val(color),
                    val(t),
                    far,
                    s,
                    nodes[i].value.data(),
                    weights,
                    gd,
                    CompositeGrads {
                        sigma: gs.as_mut().map(|x| x.data_mut()),
                        color: gc.as_mut().map(|x| x.data_mut()),
                        t: gt.as_mut().map(|x| x.data_mut()),
                    },
                );
                for (v, g) in [(*sigma, gs), (*color, gc), (*t, gt)] {
                    if let Some(g) = g {
                        match &mut grads[v.0] {
                            Some(existing) => existing.add_assign(&g),
                            empty => *empty = Some(g),
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, zero-initialized on first use; `None` when `v`
/// does not require a gradient.
fn slot<'a, T: Real>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let s = &mut grads[v.0];
    if s.is_none() {
        *s = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
    }
    s.as_mut().map(|t| t.data_mut())
}

fn zip_into<T: Real>(dst: &mut [T], g: &[T], f: impl Fn(usize, T) -> T) {
    for (j, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d = *d + f(j, gi);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(tape: &Tape<f64>, v: Var) -> Vec<f64> {
        tape.value(v).data().to_vec()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 3, &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(vec_of(&tape, y), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 3, &[0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        for v in vec_of(&tape, y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ones_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(vec![2, 3], 1.0));
        let b = tape.constant(Tensor::full(vec![3, 1], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(vec_of(&tape, c), vec![3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn derivative_of_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn derivative_of_sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros(vec![2]));
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(AutodiffError::BackwardTwice));
    }

    #[test]
    fn masked_softmax_zeroes_invalid_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::matrix(2, 3, &[5.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape
            .masked_softmax(x, vec![false, true, true, false, false, false])
            .unwrap();
        assert_eq!(vec_of(&tape, y), vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn composite_opaque_sample_returns_its_color() {
        let mut tape = Tape::<f64>::new();
        let sigma = tape.constant(Tensor::matrix(1, 1, &[20.0]).unwrap());
        let color = tape.constant(Tensor::matrix(1, 3, &[1.0, 0.5, 0.25]).unwrap());
        let t = tape.constant(Tensor::matrix(1, 1, &[2.0]).unwrap());
        let out = tape.composite(sigma, color, t, vec![3.0]).unwrap();
        let o = vec_of(&tape, out);
        let a = 1.0 - (-20.0f64).exp();
        assert!((o[0] - a).abs() < 1e-12 && (o[1] - 0.5 * a).abs() < 1e-12);
        assert!((o[3] - a).abs() < 1e-12);
        assert!((o[4] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn composite_of_empty_space_is_transparent() {
        let mut tape = Tape::<f64>::new();
        let sigma = tape.constant(Tensor::zeros(vec![1, 4]));
        let color = tape.constant(Tensor::full(vec![4, 3], 0.7));
        let t = tape.constant(Tensor::matrix(1, 4, &[0.5, 1.5, 2.5, 3.5]).unwrap());
        let out = tape.composite(sigma, color, t, vec![4.0]).unwrap();
        assert_eq!(&vec_of(&tape, out)[..4], &[0.0; 4]);
    }
}
