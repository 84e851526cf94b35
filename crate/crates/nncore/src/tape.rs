//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Nodes are recorded in execution order, so the tape index order is already a
//! topological order; `backward` walks it once in reverse.

use rand::Rng;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Largest magnitude accepted for log-size offsets in [`Tape::box_decode`].
pub const MAX_LOG_SIZE: f64 = 8.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    WeightedSum(Var, Vec<F>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Transpose(Var, usize, usize),
    GatherRows {
        src: Var,
        rows: Vec<usize>,
        width: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Mask(Var, Vec<F>),
    Iou(Var, Var),
    BceLogits(Var, Vec<F>),
    BceProb(Var, Vec<F>),
    BoxDecode {
        src: Var,
        rows: usize,
        cols: usize,
        stride: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); len])
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn bce_clamp<F: Real>() -> F {
    F::lit(1e-7)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) && !value.iter().all(|v| v.is_finite()) {
            let parents_finite = self.parents(&op).iter().all(|p| {
                self.nodes[p.0].value.iter().all(|v| v.is_finite())
            });
            debug_assert!(
                !parents_finite,
                "non-finite output from {:?} on finite inputs",
                std::mem::discriminant(&op)
            );
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op<F>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Iou(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::WeightedSum(a, _)
            | Op::Slice(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a, _, _)
            | Op::Mask(a, _)
            | Op::BceLogits(a, _)
            | Op::BceProb(a, _) => vec![*a],
            Op::GatherRows { src, .. } | Op::BoxDecode { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// Copies the value of `v` into a fresh leaf that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Vec<usize>, bool)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok((self.shape(a).to_vec(), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(shape, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(shape, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(shape, v, Op::Mul(a, b), rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let v = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, v, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.affine(a, s, F::zero())
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, v, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, F::tanh, Op::Tanh(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// `sum_i weights[i] * a[i]`; weights are constants.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return shape_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(a).len()),
            );
        }
        let s = zip_map(self.value(a), &weights, |x, w| x * w).into_iter().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum(a, weights), rg))
    }

    /// Mean of all entries; an empty input yields a constant zero.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        if n == 0 {
            return self.constant(Tensor::scalar(F::zero()));
        }
        let w = vec![F::one() / F::lit(n as f64); n];
        self.weighted_sum(a, w).expect("weights sized to input")
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut rg = false;
        let mut v = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err("concat", format!("trailing dims {:?} vs {:?}", &s[1..], tail));
            }
            lead += s[0];
            rg |= self.rg(p);
            v.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, v, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return shape_err("slice", format!("{start}+{len} out of {shape:?}"));
        }
        let inner: usize = shape[1..].iter().product();
        let v = self.value(a)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(out_shape, v, Op::Slice(a, start * inner), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a)));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// Transpose of a 2-D node.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut v = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], v, Op::Transpose(a, r, c), rg))
    }

    /// Selects rows of a node viewed as `[shape[0], rest]`. Rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = s.first().copied().unwrap_or(0);
        let width: usize = s[1..].iter().product();
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return shape_err("gather_rows", format!("row {bad} out of {n}"));
        }
        let src = self.value(a);
        let mut v = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            v.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&s[1..]);
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            v,
            Op::GatherRows {
                src: a,
                rows: rows.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Cross-correlation of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}"));
        }
        if xs[0] != ws[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[0], ws[1]),
            );
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_c: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        if xs[1] + 2 * pad < geom.k || xs[2] + 2 * pad < geom.k {
            return shape_err("conv2d", format!("kernel {} larger than padded input {xs:?}", geom.k));
        }
        let (out, cols) = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // The patch matrix is only needed when the kernel receives a gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.out_c, geom.out_h(), geom.out_w()],
            out,
            Op::Conv { x, w, b, geom, cols },
            rg,
        ))
    }

    /// Multiplies by a fixed mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return shape_err("mask", format!("{} mask entries for {}", mask.len(), self.value(a).len()));
        }
        let v = zip_map(self.value(a), &mask, |x, m| x * m);
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(shape, v, Op::Mask(a, mask), rg))
    }

    /// Inverted dropout: in training mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        self.mask(a, mask)
    }

    /// Row-wise IoU of two `[N, 4]` box nodes in `(cx, cy, w, h)` layout.
    pub fn iou(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "iou")?;
        if shape.len() != 2 || shape[1] != 4 {
            return shape_err("iou", format!("expected [N, 4], got {shape:?}"));
        }
        let v = self
            .value(a)
            .chunks(4)
            .zip(self.value(b).chunks(4))
            .map(|(p, q)| iou_cxcywh(p, q))
            .collect();
        Ok(self.push(vec![shape[0]], v, Op::Iou(a, b), rg))
    }

    /// Elementwise binary cross-entropy of `sigmoid(z)` against constant targets,
    /// evaluated in the overflow-free logit form.
    pub fn bce_logits(&mut self, z: Var, targets: Vec<F>) -> Result<Var> {
        if targets.len() != self.value(z).len() {
            return shape_err("bce_logits", format!("{} targets for {} logits", targets.len(), self.value(z).len()));
        }
        let v = zip_map(self.value(z), &targets, |z, y| {
            z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln()
        });
        let (shape, rg) = (self.shape(z).to_vec(), self.rg(z));
        Ok(self.push(shape, v, Op::BceLogits(z, targets), rg))
    }

    /// Elementwise binary cross-entropy of probabilities against constant
    /// targets, with `p` clamped to `[1e-7, 1 - 1e-7]` before the logarithm.
    pub fn bce(&mut self, p: Var, targets: Vec<F>) -> Result<Var> {
        if targets.len() != self.value(p).len() {
            return shape_err("bce", format!("{} targets for {} predictions", targets.len(), self.value(p).len()));
        }
        let v = zip_map(self.value(p), &targets, bce_value);
        let (shape, rg) = (self.shape(p).to_vec(), self.rg(p));
        Ok(self.push(shape, v, Op::BceProb(p, targets), rg))
    }

    /// Decodes `[4, R, C]` offsets `(dx, dy, dw, dh)` on a grid of the given
    /// stride into `[R * C, 4]` boxes `(cx, cy, w, h)`:
    /// centre = cell centre + offset * stride, size = stride * exp(log-size).
    /// Log-sizes are clamped to `±MAX_LOG_SIZE`.
    pub fn box_decode(&mut self, a: Var, stride: F) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != 4 {
            return shape_err("box_decode", format!("expected [4, R, C], got {s:?}"));
        }
        let (rows, cols) = (s[1], s[2]);
        let plane = rows * cols;
        let src = self.value(a);
        let half = F::lit(0.5);
        let lim = F::lit(MAX_LOG_SIZE);
        let mut v = vec![F::zero(); plane * 4];
        for i in 0..rows {
            for j in 0..cols {
                let c = i * cols + j;
                let cx = (F::lit(j as f64) + half) * stride;
                let cy = (F::lit(i as f64) + half) * stride;
                v[c * 4] = cx + src[c] * stride;
                v[c * 4 + 1] = cy + src[plane + c] * stride;
                v[c * 4 + 2] = stride * src[2 * plane + c].max(-lim).min(lim).exp();
                v[c * 4 + 3] = stride * src[3 * plane + c].max(-lim).min(lim).exp();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![plane, 4],
            v,
            Op::BoxDecode {
                src: a,
                rows,
                cols,
                stride,
            },
            rg,
        ))
    }

    /// Back-propagates from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (F::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (F::one() - y * y);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(x);
                        *d += g * s * (F::one() + x * (F::one() - s));
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum(a, w) => acc(*a, &mut |d| {
                for (d, &w) in d.iter_mut().zip(w) {
                    *d += g[0] * w;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice(a, off) => acc(*a, &mut |d| add_into(&mut d[*off..*off + g.len()], g)),
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Transpose(a, r, c) => acc(*a, &mut |d| {
                for i in 0..*r {
                    for j in 0..*c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }),
            Op::GatherRows { src, rows, width } => acc(*src, &mut |d| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * width..(r + 1) * width], &g[k * width..(k + 1) * width]);
                }
            }),
            Op::Conv { x, w, b, geom, cols } => {
                let wv = self.value(*w);
                acc(*x, &mut |d| conv::backward_input(g, wv, geom, d));
                acc(*w, &mut |d| conv::backward_weight(g, cols, geom, d));
                if let Some(b) = b {
                    acc(*b, &mut |d| conv::backward_bias(g, geom, d));
                }
            }
            Op::Mask(a, m) => acc(*a, &mut |d| {
                for ((d, &g), &m) in d.iter_mut().zip(g).zip(m) {
                    *d += g * m;
                }
            }),
            Op::Iou(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = g.len();
                let mut da = vec![F::zero(); n * 4];
                let mut db = vec![F::zero(); n * 4];
                for k in 0..n {
                    iou_cxcywh_grad(
                        &av[k * 4..k * 4 + 4],
                        &bv[k * 4..k * 4 + 4],
                        g[k],
                        &mut da[k * 4..k * 4 + 4],
                        &mut db[k * 4..k * 4 + 4],
                    );
                }
                acc(*a, &mut |d| add_into(d, &da));
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::BceLogits(z, y) => {
                let zv = self.value(*z);
                acc(*z, &mut |d| {
                    for (((d, &g), &z), &y) in d.iter_mut().zip(g).zip(zv).zip(y) {
                        *d += g * (sigmoid(z) - y);
                    }
                });
            }
            Op::BceProb(p, y) => {
                let pv = self.value(*p);
                let lo = bce_clamp::<F>();
                let hi = F::one() - lo;
                acc(*p, &mut |d| {
                    for (((d, &g), &p), &y) in d.iter_mut().zip(g).zip(pv).zip(y) {
                        if p > lo && p < hi {
                            *d += g * (p - y) / (p * (F::one() - p));
                        }
                    }
                });
            }
            Op::BoxDecode {
                src,
                rows,
                cols,
                stride,
            } => {
                let plane = rows * cols;
                let sv = self.value(*src);
                let y = &node.value;
                let lim = F::lit(MAX_LOG_SIZE);
                acc(*src, &mut |d| {
                    for c in 0..plane {
                        d[c] += g[c * 4] * *stride;
                        d[plane + c] += g[c * 4 + 1] * *stride;
                        if sv[2 * plane + c].abs() < lim {
                            d[2 * plane + c] += g[c * 4 + 2] * y[c * 4 + 2];
                        }
                        if sv[3 * plane + c].abs() < lim {
                            d[3 * plane + c] += g[c * 4 + 3] * y[c * 4 + 3];
                        }
                    }
                });
            }
        }
    }
}

fn zip_map<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<F: Real>(d: &mut [F], g: &[F]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

/// Clamped binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))`.
pub fn bce_value<F: Real>(p: F, y: F) -> F {
    let lo = bce_clamp::<F>();
    let p = p.max(lo).min(F::one() - lo);
    -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
}

fn corners<F: Real>(b: &[F]) -> (F, F, F, F) {
    let h = F::lit(0.5);
    (b[0] - h * b[2], b[1] - h * b[3], b[0] + h * b[2], b[1] + h * b[3])
}

/// IoU of two `(cx, cy, w, h)` boxes.
pub fn iou_cxcywh<F: Real>(a: &[F], b: &[F]) -> F {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(F::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(F::zero());
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= F::zero() {
        return F::zero();
    }
    inter / union
}

fn iou_cxcywh_grad<F: Real>(a: &[F], b: &[F], g: F, da: &mut [F], db: &mut [F]) {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let (iw, ih, overlap) = if iw > F::zero() && ih > F::zero() {
        (iw, ih, true)
    } else {
        (F::zero(), F::zero(), false)
    };
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= F::zero() {
        return;
    }
    let u2 = union * union;
    let d_inter = g * (union + inter) / u2;
    let d_area = -g * inter / u2;
    da[2] += d_area * a[3];
    da[3] += d_area * a[2];
    db[2] += d_area * b[3];
    db[3] += d_area * b[2];
    if !overlap {
        return;
    }
    let half = F::lit(0.5);
    // d(inter) / d(edge) for the edges that bound the intersection.
    let d_iw = d_inter * ih;
    let d_ih = d_inter * iw;
    // Horizontal: min of right edges, max of left edges.
    let (rx, lx) = (ax2 <= bx2, ax1 >= bx1);
    let push_edge = |d: &mut [F], coord: usize, size: usize, val: F, sign: F| {
        d[coord] += val;
        d[size] += sign * half * val;
    };
    if rx {
        push_edge(da, 0, 2, d_iw, F::one());
    } else {
        push_edge(db, 0, 2, d_iw, F::one());
    }
    if lx {
        push_edge(da, 0, 2, -d_iw, -F::one());
    } else {
        push_edge(db, 0, 2, -d_iw, -F::one());
    }
    let (ry, ly) = (ay2 <= by2, ay1 >= by1);
    if ry {
        push_edge(da, 1, 3, d_ih, F::one());
    } else {
        push_edge(db, 1, 3, d_ih, F::one());
    }
    if ly {
        push_edge(da, 1, 3, -d_ih, -F::one());
    } else {
        push_edge(db, 1, 3, -d_ih, -F::one());
    }
}
