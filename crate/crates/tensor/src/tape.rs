//! Reverse-mode differentiation over a flat tape. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order and
//! every backward pass visits nodes in the same deterministic sequence.

use crate::kernels;
use crate::param::NamedParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;

/// Leaky rectifier slope used by every network in the workspace.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Epsilon inside per-feature normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Norm floor for row normalization; rows at or below it are scaled by 1/eps.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Conv3x3 { x: usize, w: usize, b: usize },
    Upsample2x { x: usize },
    AvgPool2x { x: usize },
    Normalize { x: usize, trailing: usize },
    LeakyRelu { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Softplus { x: usize },
    LogSoftmax { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AffineScalar { x: usize, mul: f64 },
    ScaleBy { x: usize, s: usize },
    Modulate { x: usize, scale: usize, shift: usize },
    Reshape { x: usize },
    BroadcastN { x: usize, n: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    SumTrailing { x: usize, k: usize },
    MeanTrailing { x: usize, k: usize },
    L2NormRows { x: usize },
    L2NormChannels { x: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Tape leaves for a parameter set, keyed by parameter name.
pub type ParamVars = BTreeMap<String, Var>;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Scalar value of a single-element node, for loss readouts.
    pub fn scalar_value(&self, v: Var) -> Result<T, TensorError> {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Pushes every parameter as a leaf; trainable entries request gradients
    /// only when `train` is set (frozen networks still propagate gradients
    /// through to their inputs).
    pub fn bind(&mut self, params: &NamedParamSet<T>, train: bool) -> ParamVars {
        let mut vars = ParamVars::new();
        for (name, entry) in params.iter() {
            let v = self.leaf(entry.tensor.clone(), train && entry.trainable);
            vars.insert(name.clone(), v);
        }
        vars
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite op output"
        );
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ── shape helpers ────────────────────────────────────────────────

    fn want_rank(&self, v: Var, rank: usize, op: &'static str) -> Result<(), TensorError> {
        let s = self.value(v).shape();
        if s.len() != rank {
            return Err(TensorError::InvalidArgument(format!(
                "{op}: expected rank {rank}, got shape {s:?}"
            )));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn split_trailing(shape: &[usize], k: usize, op: &'static str) -> Result<(usize, usize), TensorError> {
        if k == 0 || k > shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{op}: trailing dim count {k} invalid for shape {shape:?}"
            )));
        }
        let features: usize = shape[shape.len() - k..].iter().product();
        let groups: usize = shape[..shape.len() - k].iter().product();
        Ok((groups, features))
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// x[N,I] @ w[I,O] + b[O].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 2, "affine")?;
        self.want_rank(w, 2, "affine")?;
        self.want_rank(b, 1, "affine")?;
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::InvalidArgument(format!(
                "affine: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * o];
        kernels::matmul(self.value(x).data(), self.value(w).data(), n, i, o, &mut out);
        let bd = self.value(b).data();
        for row in 0..n {
            for (y, bv) in out[row * o..(row + 1) * o].iter_mut().zip(bd) {
                *y = *y + *bv;
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![n, o], out),
            Op::Affine { x: x.0, w: w.0, b: b.0 },
            &[x.0, w.0, b.0],
        ))
    }

    /// a[N,K] @ b[M,K]^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.want_rank(a, 2, "matmul_nt")?;
        self.want_rank(b, 2, "matmul_nt")?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        Ok(self.push(
            Tensor::from_raw(vec![n, m], out),
            Op::MatmulNT { a: a.0, b: b.0 },
            &[a.0, b.0],
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 4, "conv3x3")?;
        self.want_rank(w, 4, "conv3x3")?;
        self.want_rank(b, 1, "conv3x3")?;
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(TensorError::InvalidArgument(format!(
                "conv3x3: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let mut out = vec![T::zero(); n * co * h * wd];
        kernels::conv3x3(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            ci,
            co,
            h,
            wd,
            &mut out,
        );
        Ok(self.push(
            Tensor::from_raw(vec![n, co, h, wd], out),
            Op::Conv3x3 { x: x.0, w: w.0, b: b.0 },
            &[x.0, w.0, b.0],
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 4, "upsample2x")?;
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        kernels::upsample2x(self.value(x).data(), n, c, h, w, &mut out);
        Ok(self.push(
            Tensor::from_raw(vec![n, c, 2 * h, 2 * w], out),
            Op::Upsample2x { x: x.0 },
            &[x.0],
        ))
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 4, "avgpool2x")?;
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "avgpool2x: spatial dims must be even, got {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); n * c * h * w / 4];
        kernels::avgpool2x(self.value(x).data(), n, c, h, w, &mut out);
        Ok(self.push(
            Tensor::from_raw(vec![n, c, h / 2, w / 2], out),
            Op::AvgPool2x { x: x.0 },
            &[x.0],
        ))
    }

    /// Zero-mean unit-variance normalization over the trailing `k` dims.
    pub fn normalize(&mut self, x: Var, trailing: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (groups, f) = Self::split_trailing(&shape, trailing, "normalize")?;
        let eps = T::of_f64(NORM_EPS);
        let finv = T::of_f64(1.0 / f as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for gi in 0..groups {
            let src = &xd[gi * f..(gi + 1) * f];
            let mut mean = T::zero();
            for v in src {
                mean = mean + *v;
            }
            mean = mean * finv;
            let mut var = T::zero();
            for v in src {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var * finv;
            let s = (var + eps).sqrt().recip();
            for (o, v) in out[gi * f..(gi + 1) * f].iter_mut().zip(src) {
                *o = (*v - mean) * s;
            }
        }
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Normalize { x: x.0, trailing },
            &[x.0],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = T::of_f64(LEAKY_SLOPE);
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::LeakyRelu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Sigmoid { x: x.0 }, &[x.0])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Exp { x: x.0 }, &[x.0])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Softplus { x: x.0 }, &[x.0])
    }

    /// Log-softmax over the last dim.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (groups, f) = Self::split_trailing(&shape, 1, "log_softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for gi in 0..groups {
            let src = &xd[gi * f..(gi + 1) * f];
            let mut mx = src[0];
            for v in src {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut lse = T::zero();
            for v in src {
                lse = lse + (*v - mx).exp();
            }
            let lse = lse.ln() + mx;
            for (o, v) in out[gi * f..(gi + 1) * f].iter_mut().zip(src) {
                *o = *v - lse;
            }
        }
        Ok(self.push(Tensor::from_raw(shape, out), Op::LogSoftmax { x: x.0 }, &[x.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// mul * x + add, with compile-time constants.
    pub fn affine_scalar(&mut self, x: Var, mul: f64, add: f64) -> Result<Var, TensorError> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(TensorError::InvalidArgument(
                "affine_scalar: coefficients must be finite".into(),
            ));
        }
        let (m, a) = (T::of_f64(mul), T::of_f64(add));
        let out: Vec<T> = self.value(x).data().iter().map(|&v| m * v + a).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::AffineScalar { x: x.0, mul },
            &[x.0],
        ))
    }

    /// x * s where s is a single-element variable (learnable scale).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "scale_by: scale must have one element, shape is {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::ScaleBy { x: x.0, s: s.0 },
            &[x.0, s.0],
        ))
    }

    /// Per-channel feature modulation: y[n,c,h,w] = x * (1 + scale[n,c]) + shift[n,c].
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 4, "modulate")?;
        self.want_rank(scale, 2, "modulate")?;
        self.same_shape(scale, shift, "modulate")?;
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(scale).shape().to_vec();
        if ss[0] != xs[0] || ss[1] != xs[1] {
            return Err(TensorError::InvalidArgument(format!(
                "modulate: style shape {ss:?} does not match feature maps {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = self.value(x).data();
        let scd = self.value(scale).data();
        let shd = self.value(shift).data();
        let mut out = vec![T::zero(); xd.len()];
        let one = T::one();
        for nn in 0..n {
            for cc in 0..c {
                let g = one + scd[nn * c + cc];
                let b = shd[nn * c + cc];
                let base = (nn * c + cc) * plane;
                for i in 0..plane {
                    out[base + i] = xd[base + i] * g + b;
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(xs, out),
            Op::Modulate {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
            &[x.0, scale.0, shift.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Stacks `n` copies of x along a new leading axis.
    pub fn broadcast_n(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        if n == 0 {
            return Err(TensorError::InvalidArgument(
                "broadcast_n: n must be positive".into(),
            ));
        }
        let src = self.value(x).data();
        let mut shape = vec![n];
        shape.extend_from_slice(self.value(x).shape());
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        Ok(self.push(Tensor::from_raw(shape, out), Op::BroadcastN { x: x.0, n }, &[x.0]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for v in self.value(x).data() {
            acc = acc + *v;
        }
        self.push(Tensor::from_raw(vec![1], vec![acc]), Op::SumAll { x: x.0 }, &[x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut acc = T::zero();
        for v in self.value(x).data() {
            acc = acc + *v;
        }
        let m = acc * T::of_f64(1.0 / n as f64);
        self.push(Tensor::from_raw(vec![1], vec![m]), Op::MeanAll { x: x.0 }, &[x.0])
    }

    pub fn sum_trailing(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (groups, f) = Self::split_trailing(&shape, k, "sum_trailing")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); groups];
        for gi in 0..groups {
            for v in &xd[gi * f..(gi + 1) * f] {
                out[gi] = out[gi] + *v;
            }
        }
        let oshape = Self::reduced_shape(&shape, k);
        Ok(self.push(
            Tensor::from_raw(oshape, out),
            Op::SumTrailing { x: x.0, k },
            &[x.0],
        ))
    }

    pub fn mean_trailing(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (groups, f) = Self::split_trailing(&shape, k, "mean_trailing")?;
        let finv = T::of_f64(1.0 / f as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); groups];
        for gi in 0..groups {
            for v in &xd[gi * f..(gi + 1) * f] {
                out[gi] = out[gi] + *v;
            }
            out[gi] = out[gi] * finv;
        }
        let oshape = Self::reduced_shape(&shape, k);
        Ok(self.push(
            Tensor::from_raw(oshape, out),
            Op::MeanTrailing { x: x.0, k },
            &[x.0],
        ))
    }

    fn reduced_shape(shape: &[usize], k: usize) -> Vec<usize> {
        if shape.len() == k {
            vec![1]
        } else {
            shape[..shape.len() - k].to_vec()
        }
    }

    /// Unit L2 normalization over the last dim.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (groups, f) = Self::split_trailing(&shape, 1, "l2_normalize_rows")?;
        let eps = T::of_f64(L2_EPS);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for gi in 0..groups {
            let src = &xd[gi * f..(gi + 1) * f];
            let mut sq = T::zero();
            for v in src {
                sq = sq + *v * *v;
            }
            let n = sq.sqrt().max(eps);
            let ninv = n.recip();
            for (o, v) in out[gi * f..(gi + 1) * f].iter_mut().zip(src) {
                *o = *v * ninv;
            }
        }
        Ok(self.push(Tensor::from_raw(shape, out), Op::L2NormRows { x: x.0 }, &[x.0]))
    }

    /// Unit L2 normalization along the channel dim of [N,C,H,W] features,
    /// per spatial position.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        self.want_rank(x, 4, "l2_normalize_channels")?;
        let shape = self.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let eps = T::of_f64(L2_EPS);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for nn in 0..n {
            let base = nn * c * plane;
            for p in 0..plane {
                let mut sq = T::zero();
                for cc in 0..c {
                    let v = xd[base + cc * plane + p];
                    sq = sq + v * v;
                }
                let ninv = sq.sqrt().max(eps).recip();
                for cc in 0..c {
                    out[base + cc * plane + p] = xd[base + cc * plane + p] * ninv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::L2NormChannels { x: x.0 },
            &[x.0],
        ))
    }

    /// Row-wise cosine similarity of two [N,D] values.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "cosine_rows")?;
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        let prod = self.mul(an, bn)?;
        self.sum_trailing(prod, 1)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients for
    /// every node on a path from a grad-requiring leaf to the root.
    pub fn backward(&self, root: Var) -> Result<Grads<T>, TensorError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward root must be scalar, shape is {:?}",
                root_val.shape()
            )));
        }
        if !root_val.data()[0].is_finite() {
            return Err(TensorError::NonFinite {
                context: "backward root".into(),
                index: 0,
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::from_raw(vec![1], vec![T::one()]));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                slots[idx] = None;
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.accumulate_inputs(idx, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn add_into(slot: &mut Option<Tensor<T>>, shape: &[usize], contrib: Vec<T>) {
        match slot {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(&contrib) {
                    *d = *d + *s;
                }
            }
            None => *slot = Some(Tensor::from_raw(shape.to_vec(), contrib)),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_inputs(&self, idx: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xs, ws) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
                let (n, i, o) = (xs[0], xs[1], ws[1]);
                if self.needs(x) {
                    let mut dx = vec![T::zero(); n * i];
                    kernels::matmul_nt(gd, self.nodes[w].value.data(), n, o, i, &mut dx);
                    Self::add_into(&mut slots[x], xs, dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); i * o];
                    kernels::matmul_tn(self.nodes[x].value.data(), gd, n, i, o, &mut dw);
                    Self::add_into(&mut slots[w], ws, dw);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); o];
                    for row in 0..n {
                        for (dbv, gv) in db.iter_mut().zip(&gd[row * o..(row + 1) * o]) {
                            *dbv = *dbv + *gv;
                        }
                    }
                    Self::add_into(&mut slots[b], &[o], db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[0]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); n * k];
                    kernels::matmul(gd, self.nodes[b].value.data(), n, m, k, &mut da);
                    Self::add_into(&mut slots[a], sa, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); m * k];
                    kernels::matmul_tn(gd, self.nodes[a].value.data(), n, m, k, &mut db);
                    Self::add_into(&mut slots[b], sb, db);
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let (xs, ws) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = ws[0];
                if self.needs(x) {
                    let mut dx = vec![T::zero(); n * ci * h * wd];
                    kernels::conv3x3_dx(gd, self.nodes[w].value.data(), n, ci, co, h, wd, &mut dx);
                    Self::add_into(&mut slots[x], xs, dx);
                }
                if self.needs(w) || self.needs(b) {
                    let mut dw = vec![T::zero(); co * ci * 9];
                    let mut db = vec![T::zero(); co];
                    kernels::conv3x3_dw(
                        gd,
                        self.nodes[x].value.data(),
                        n,
                        ci,
                        co,
                        h,
                        wd,
                        &mut dw,
                        &mut db,
                    );
                    if self.needs(w) {
                        Self::add_into(&mut slots[w], ws, dw);
                    }
                    if self.needs(b) {
                        Self::add_into(&mut slots[b], &[co], db);
                    }
                }
            }
            Op::Upsample2x { x } => {
                let xs = self.nodes[x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![T::zero(); n * c * h * w];
                kernels::upsample2x_back(gd, n, c, h, w, &mut dx);
                Self::add_into(&mut slots[x], xs, dx);
            }
            Op::AvgPool2x { x } => {
                let xs = self.nodes[x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![T::zero(); n * c * h * w];
                kernels::avgpool2x_back(gd, n, c, h, w, &mut dx);
                Self::add_into(&mut slots[x], xs, dx);
            }
            Op::Normalize { x, trailing } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (groups, f) = Self::split_trailing(&xs, trailing, "normalize").unwrap();
                let finv = T::of_f64(1.0 / f as f64);
                let eps = T::of_f64(NORM_EPS);
                let xd = self.nodes[x].value.data();
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); xd.len()];
                for gi in 0..groups {
                    let xr = &xd[gi * f..(gi + 1) * f];
                    let yr = &yd[gi * f..(gi + 1) * f];
                    let gr = &gd[gi * f..(gi + 1) * f];
                    let mut mean = T::zero();
                    for v in xr {
                        mean = mean + *v;
                    }
                    mean = mean * finv;
                    let mut var = T::zero();
                    for v in xr {
                        let d = *v - mean;
                        var = var + d * d;
                    }
                    var = var * finv;
                    let s = (var + eps).sqrt().recip();
                    let mut gmean = T::zero();
                    let mut gymean = T::zero();
                    for (gv, yv) in gr.iter().zip(yr) {
                        gmean = gmean + *gv;
                        gymean = gymean + *gv * *yv;
                    }
                    gmean = gmean * finv;
                    gymean = gymean * finv;
                    for ((dv, gv), yv) in dx[gi * f..(gi + 1) * f].iter_mut().zip(gr).zip(yr) {
                        *dv = s * (*gv - gmean - *yv * gymean);
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
            Op::LeakyRelu { x } => {
                let slope = T::of_f64(LEAKY_SLOPE);
                let xd = self.nodes[x].value.data();
                let dx: Vec<T> = gd
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| if *xv > T::zero() { *gv } else { *gv * slope })
                    .collect();
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let yd = self.nodes[idx].value.data();
                let one = T::one();
                let dx: Vec<T> = gd
                    .iter()
                    .zip(yd)
                    .map(|(gv, yv)| *gv * *yv * (one - *yv))
                    .collect();
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::Exp { x } => {
                let yd = self.nodes[idx].value.data();
                let dx: Vec<T> = gd.iter().zip(yd).map(|(gv, yv)| *gv * *yv).collect();
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::Softplus { x } => {
                let xd = self.nodes[x].value.data();
                let one = T::one();
                let dx: Vec<T> = gd
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| {
                        let s = if *xv >= T::zero() {
                            one / (one + (-*xv).exp())
                        } else {
                            let e = xv.exp();
                            e / (one + e)
                        };
                        *gv * s
                    })
                    .collect();
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::LogSoftmax { x } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (groups, f) = Self::split_trailing(&xs, 1, "log_softmax").unwrap();
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); yd.len()];
                for gi in 0..groups {
                    let gr = &gd[gi * f..(gi + 1) * f];
                    let yr = &yd[gi * f..(gi + 1) * f];
                    let mut gsum = T::zero();
                    for gv in gr {
                        gsum = gsum + *gv;
                    }
                    for ((dv, gv), yv) in dx[gi * f..(gi + 1) * f].iter_mut().zip(gr).zip(yr) {
                        *dv = *gv - yv.exp() * gsum;
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    Self::add_into(&mut slots[a], self.nodes[a].value.shape(), gd.to_vec());
                }
                if self.needs(b) {
                    Self::add_into(&mut slots[b], self.nodes[b].value.shape(), gd.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    Self::add_into(&mut slots[a], self.nodes[a].value.shape(), gd.to_vec());
                }
                if self.needs(b) {
                    let neg: Vec<T> = gd.iter().map(|v| -*v).collect();
                    Self::add_into(&mut slots[b], self.nodes[b].value.shape(), neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<T> = gd
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(gv, bv)| *gv * *bv)
                        .collect();
                    Self::add_into(&mut slots[a], self.nodes[a].value.shape(), da);
                }
                if self.needs(b) {
                    let db: Vec<T> = gd
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, av)| *gv * *av)
                        .collect();
                    Self::add_into(&mut slots[b], self.nodes[b].value.shape(), db);
                }
            }
            Op::AffineScalar { x, mul } => {
                let m = T::of_f64(mul);
                let dx: Vec<T> = gd.iter().map(|gv| *gv * m).collect();
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s].value.data()[0];
                if self.needs(x) {
                    let dx: Vec<T> = gd.iter().map(|gv| *gv * sv).collect();
                    Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
                }
                if self.needs(s) {
                    let mut acc = T::zero();
                    for (gv, xv) in gd.iter().zip(self.nodes[x].value.data()) {
                        acc = acc + *gv * *xv;
                    }
                    Self::add_into(&mut slots[s], &[1], vec![acc]);
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let one = T::one();
                let scd = self.nodes[scale].value.data();
                let xd = self.nodes[x].value.data();
                if self.needs(x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for nn in 0..n {
                        for cc in 0..c {
                            let gmul = one + scd[nn * c + cc];
                            let base = (nn * c + cc) * plane;
                            for i in 0..plane {
                                dx[base + i] = gd[base + i] * gmul;
                            }
                        }
                    }
                    Self::add_into(&mut slots[x], &xs, dx);
                }
                if self.needs(scale) || self.needs(shift) {
                    let mut dsc = vec![T::zero(); n * c];
                    let mut dsh = vec![T::zero(); n * c];
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * plane;
                            let mut asc = T::zero();
                            let mut ash = T::zero();
                            for i in 0..plane {
                                asc = asc + gd[base + i] * xd[base + i];
                                ash = ash + gd[base + i];
                            }
                            dsc[nn * c + cc] = asc;
                            dsh[nn * c + cc] = ash;
                        }
                    }
                    if self.needs(scale) {
                        Self::add_into(&mut slots[scale], &[n, c], dsc);
                    }
                    if self.needs(shift) {
                        Self::add_into(&mut slots[shift], &[n, c], dsh);
                    }
                }
            }
            Op::Reshape { x } => {
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), gd.to_vec());
            }
            Op::BroadcastN { x, n } => {
                let xs = self.nodes[x].value.shape();
                let m = self.nodes[x].value.numel();
                let mut dx = vec![T::zero(); m];
                for rep in 0..n {
                    for (dv, gv) in dx.iter_mut().zip(&gd[rep * m..(rep + 1) * m]) {
                        *dv = *dv + *gv;
                    }
                }
                Self::add_into(&mut slots[x], xs, dx);
            }
            Op::SumAll { x } => {
                let gv = gd[0];
                let dx = vec![gv; self.nodes[x].value.numel()];
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::MeanAll { x } => {
                let m = self.nodes[x].value.numel();
                let gv = gd[0] * T::of_f64(1.0 / m as f64);
                let dx = vec![gv; m];
                Self::add_into(&mut slots[x], self.nodes[x].value.shape(), dx);
            }
            Op::SumTrailing { x, k } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (groups, f) = Self::split_trailing(&xs, k, "sum_trailing").unwrap();
                let mut dx = vec![T::zero(); groups * f];
                for gi in 0..groups {
                    let gv = gd[gi];
                    for dv in &mut dx[gi * f..(gi + 1) * f] {
                        *dv = gv;
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
            Op::MeanTrailing { x, k } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (groups, f) = Self::split_trailing(&xs, k, "mean_trailing").unwrap();
                let finv = T::of_f64(1.0 / f as f64);
                let mut dx = vec![T::zero(); groups * f];
                for gi in 0..groups {
                    let gv = gd[gi] * finv;
                    for dv in &mut dx[gi * f..(gi + 1) * f] {
                        *dv = gv;
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
            Op::L2NormRows { x } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (groups, f) = Self::split_trailing(&xs, 1, "l2_normalize_rows").unwrap();
                let eps = T::of_f64(L2_EPS);
                let xd = self.nodes[x].value.data();
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); xd.len()];
                for gi in 0..groups {
                    let xr = &xd[gi * f..(gi + 1) * f];
                    let yr = &yd[gi * f..(gi + 1) * f];
                    let gr = &gd[gi * f..(gi + 1) * f];
                    let mut sq = T::zero();
                    for v in xr {
                        sq = sq + *v * *v;
                    }
                    let n = sq.sqrt().max(eps);
                    let ninv = n.recip();
                    let mut gy = T::zero();
                    for (gv, yv) in gr.iter().zip(yr) {
                        gy = gy + *gv * *yv;
                    }
                    for ((dv, gv), yv) in dx[gi * f..(gi + 1) * f].iter_mut().zip(gr).zip(yr) {
                        *dv = (*gv - *yv * gy) * ninv;
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
            Op::L2NormChannels { x } => {
                let xs = self.nodes[x].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let eps = T::of_f64(L2_EPS);
                let xd = self.nodes[x].value.data();
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![T::zero(); xd.len()];
                for nn in 0..n {
                    let base = nn * c * plane;
                    for p in 0..plane {
                        let mut sq = T::zero();
                        let mut gy = T::zero();
                        for cc in 0..c {
                            let i = base + cc * plane + p;
                            sq = sq + xd[i] * xd[i];
                            gy = gy + gd[i] * yd[i];
                        }
                        let ninv = sq.sqrt().max(eps).recip();
                        for cc in 0..c {
                            let i = base + cc * plane + p;
                            dx[i] = (gd[i] - yd[i] * gy) * ninv;
                        }
                    }
                }
                Self::add_into(&mut slots[x], &xs, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_forward_known_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5]);
    }

    #[test]
    fn affine_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.affine(x, w, b).is_err());
    }

    #[test]
    fn backward_of_mean_square_is_linear() {
        // loss = mean((x)^2), dloss/dx = 2x/n
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        let expect = [0.5, -1.0, 1.5, 0.25];
        for (a, b) in gx.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.add(x, x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // loss = sum(x*x + x) -> d/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn log_softmax_rows_sum_to_one_after_exp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = tape.log_softmax(x).unwrap();
        let yd = tape.value(y).data();
        for row in 0..2 {
            let s: f64 = yd[row * 3..(row + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.3, -0.4]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let yd = tape.value(y).data();
        for row in 0..2 {
            let n: f64 = yd[row * 2..(row + 1) * 2].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_identical_rows_is_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 3], &[0.2, -0.5, 1.0]));
        let b = tape.constant(t(&[1, 3], &[0.2, -0.5, 1.0]));
        let c = tape.cosine_rows(a, b).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_channels_unit_norm_per_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[3.0, 1.0, 4.0, -2.0]));
        let y = tape.l2_normalize_channels(x).unwrap();
        let yd = tape.value(y).data();
        // Positions are (c0,c1) pairs: (3,4) and (1,-2).
        for p in 0..2 {
            let n = yd[p] * yd[p] + yd[2 + p] * yd[2 + p];
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_applies_per_channel_scale_and_shift() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let sc = tape.constant(t(&[1, 2], &[1.0, 0.0])); // channel 0 doubled
        let sh = tape.constant(t(&[1, 2], &[0.0, 10.0])); // channel 1 shifted
        let y = tape.modulate(x, sc, sh).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 13.0, 14.0]);
    }
}
