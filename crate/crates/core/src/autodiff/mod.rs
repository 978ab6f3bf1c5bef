//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node. [`Graph::backward`] walks
//! the nodes in reverse creation order, so gradients are exact for any
//! computation expressed through the graph's methods. Ops that the model
//! leans on heavily (convolutions, instance normalization, the Gaussian KL
//! and likelihood terms) are fused into single nodes with hand-written
//! adjoints.

mod conv;

use crate::tensor::{lit, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
    MeanBatch(Var),
    Swish(Var),
    Clamp { x: Var, lo: T, hi: T },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var> },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    RepeatBatch { x: Var, n: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat1(Vec<Var>),
    Narrow1 { x: Var, start: usize },
    Upsample2x(Var),
    Reparam { mu: Var, log_var: Var, eps: Tensor<T> },
    KlGaussian { qm: Var, qlv: Var, pm: Var, plv: Var },
    GaussianNll { mu: Var, target: Tensor<T>, log_std: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
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

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `(outer, dim1, inner)` view of a tensor of rank >= 2 around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op on rank-{} tensor", shape.len());
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `sum_i w_i * x_i`, accumulated left to right starting from zero.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = Tensor::zeros(self.shape(terms[0].0));
        for &(v, w) in terms {
            let src = self.value(v);
            assert_eq!(src.shape(), acc.shape(), "weighted_sum shape mismatch");
            for (a, &x) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(acc, Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Mean over a rank-1 batch vector, producing a scalar.
    pub fn mean_batch(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "mean_batch expects a vector");
        let v = Tensor::scalar(t.sum() / lit(t.numel() as f64));
        let ng = self.ng(a);
        self.push(v, Op::MeanBatch(a), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Swish(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp { x: a, lo, hi }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// 2-d convolution with square kernel `w: (co, ci, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Depthwise convolution with kernel `w: (c, 1, k, k)`, odd `k`, same padding.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = conv::depthwise_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Depthwise { x, w, b }, ng)
    }

    /// Normalizes every `(sample, channel)` plane of an NCHW tensor to zero
    /// mean and unit variance over its spatial positions.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let (bs, c, h, w) = t.dims4();
        let hw = h * w;
        let n: T = lit(hw as f64);
        let mut out = Tensor::zeros(t.shape());
        let mut inv_std = Vec::with_capacity(bs * c);
        for p in 0..bs * c {
            let src = &t.data()[p * hw..(p + 1) * hw];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    /// `x * gamma + beta` with per-sample, per-channel `gamma, beta: (b, c)`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (bs, c, h, w) = t.dims4();
        let (g, be) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), [bs, c], "gamma shape");
        assert_eq!(be.shape(), [bs, c], "beta shape");
        let hw = h * w;
        let mut out = Tensor::zeros(t.shape());
        for p in 0..bs * c {
            let (gv, bv) = (g.data()[p], be.data()[p]);
            for (o, &v) in out.data_mut()[p * hw..(p + 1) * hw]
                .iter_mut()
                .zip(&t.data()[p * hw..(p + 1) * hw])
            {
                *o = v * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::ChannelAffine { x, gamma, beta }, ng)
    }

    /// Repeats a tensor with leading dimension 1 `n` times along that axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.dim(0), 1, "repeat_batch expects a leading axis of 1");
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(t.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&shape, data).expect("consistent shape");
        let ng = self.ng(x);
        self.push(v, Op::RepeatBatch { x, n }, ng)
    }

    /// `x (b, i) @ w (i, o) + bias (o)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (m, k) = (xt.dim(0), xt.dim(1));
        assert_eq!(wt.dim(0), k, "linear: inner dimension mismatch");
        let n = wt.dim(1);
        let mut out = Tensor::zeros(&[m, n]);
        let beta = if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(bd);
            }
            T::one()
        } else {
            T::zero()
        };
        crate::tensor::gemm(m, k, n, xt.data(), false, wt.data(), false, out.data_mut(), beta);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Concatenation along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis1(&first);
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let (po, pc, pi) = split_axis1(t.shape());
                assert!(po == outer && pi == inner, "concat1 shape mismatch");
                data.extend_from_slice(&t.data()[o * pc * pi..(o + 1) * pc * pi]);
            }
        }
        let v = Tensor::from_vec(&shape, data).expect("consistent shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat1(parts.to_vec()), ng)
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (outer, c, inner) = split_axis1(t.shape());
        assert!(start + len <= c, "narrow1 out of range");
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let v = Tensor::from_vec(&shape, data).expect("consistent shape");
        let ng = self.ng(x);
        self.push(v, Op::Narrow1 { x, start }, ng)
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (bs, c, h, w) = t.dims4();
        let mut out = Tensor::zeros(&[bs, c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for p in 0..bs * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    od[(p * 2 * h + i) * 2 * w + j] = t.data()[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Reparameterized draw `mu + exp(log_var / 2) * eps`.
    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: Tensor<T>) -> Var {
        let half: T = lit(0.5);
        let (m, lv) = (self.value(mu), self.value(log_var));
        assert_eq!(m.shape(), eps.shape(), "noise shape mismatch");
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&mv, &l), &e)| mv + (half * l).exp() * e)
            .collect();
        let z = Tensor::from_vec(m.shape(), data).expect("shape");
        let ng = self.ng(mu) || self.ng(log_var);
        self.push(z, Op::Reparam { mu, log_var, eps }, ng)
    }

    /// Per-sample `KL(N(qm, e^qlv) || N(pm, e^plv))`, summed over all
    /// non-batch elements. Output shape `(b,)`.
    pub fn kl_gaussian(&mut self, qm: Var, qlv: Var, pm: Var, plv: Var) -> Var {
        let shape = self.shape(qm).to_vec();
        for v in [qlv, pm, plv] {
            assert_eq!(self.shape(v), shape.as_slice(), "kl_gaussian shape mismatch");
        }
        let bs = shape[0];
        let per = self.value(qm).numel() / bs;
        let half: T = lit(0.5);
        let (a, b, c, d) = (
            self.value(qm).data(),
            self.value(qlv).data(),
            self.value(pm).data(),
            self.value(plv).data(),
        );
        let mut out = Vec::with_capacity(bs);
        for s in 0..bs {
            let mut acc = T::zero();
            for i in s * per..(s + 1) * per {
                let diff = a[i] - c[i];
                acc += half * (d[i] - b[i] + (b[i] - d[i]).exp() + diff * diff * (-d[i]).exp() - T::one());
            }
            out.push(acc);
        }
        let v = Tensor::from_vec(&[bs], out).expect("batch vector");
        let ng = [qm, qlv, pm, plv].iter().any(|&x| self.ng(x));
        self.push(v, Op::KlGaussian { qm, qlv, pm, plv }, ng)
    }

    /// Per-sample negative log-likelihood of `target` under a Gaussian with
    /// mean `mu` and fixed standard deviation `exp(log_std)`. Output `(b,)`.
    pub fn gaussian_nll(&mut self, mu: Var, target: Tensor<T>, log_std: T) -> Var {
        let m = self.value(mu);
        assert_eq!(m.shape(), target.shape(), "gaussian_nll shape mismatch");
        let bs = m.dim(0);
        let per = m.numel() / bs;
        let inv_var = (lit::<T>(-2.0) * log_std).exp();
        let konst = log_std + lit::<T>(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half: T = lit(0.5);
        let mut out = Vec::with_capacity(bs);
        for s in 0..bs {
            let mut sq = T::zero();
            for i in s * per..(s + 1) * per {
                let d = target.data()[i] - m.data()[i];
                sq += d * d;
            }
            out.push(half * inv_var * sq + konst * lit(per as f64));
        }
        let v = Tensor::from_vec(&[bs], out).expect("batch vector");
        let ng = self.ng(mu);
        self.push(v, Op::GaussianNll { mu, target, log_std }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
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
                if self.ng(*a) {
                    acc(*a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, g.map(|x| x * w));
                }
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::MeanBatch(a) => {
                let n = self.value(*a).numel();
                acc(*a, Tensor::full(self.shape(*a), g.data()[0] / lit(n as f64)));
            }
            Op::Swish(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (T::one() - s))
                });
                acc(*a, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(g, self.value(*x), |gv, v| {
                    if v >= *lo && v <= *hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                acc(*x, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).expect("reshape back");
                acc(*a, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let r = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dw {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    acc(*b, d);
                }
            }
            Op::Depthwise { x, w, b } => {
                let r = conv::depthwise_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dw {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    acc(*b, d);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let xhat = &node.value;
                let (_, _, h, w) = xhat.dims4();
                let hw = h * w;
                let n: T = lit(hw as f64);
                let mut dx = Tensor::zeros(xhat.shape());
                for (p, &is) in inv_std.iter().enumerate() {
                    let r = p * hw..(p + 1) * hw;
                    let (gs, xs) = (&g.data()[r.clone()], &xhat.data()[r.clone()]);
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &xv) in dx.data_mut()[r].iter_mut().zip(gs).zip(xs) {
                        *d = is / n * (n * gv - sum_g - xv * sum_gx);
                    }
                }
                acc(*x, dx);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xt = self.value(*x);
                let (bs, c, h, w) = xt.dims4();
                let hw = h * w;
                let gm = self.value(*gamma);
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for p in 0..bs * c {
                        let gv = gm.data()[p];
                        for (d, &gg) in dx.data_mut()[p * hw..(p + 1) * hw]
                            .iter_mut()
                            .zip(&g.data()[p * hw..(p + 1) * hw])
                        {
                            *d = gg * gv;
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Tensor::zeros(&[bs, c]);
                    let mut db = Tensor::zeros(&[bs, c]);
                    for p in 0..bs * c {
                        let r = p * hw..(p + 1) * hw;
                        let gs = &g.data()[r.clone()];
                        dg.data_mut()[p] = gs.iter().zip(&xt.data()[r]).map(|(&a, &b)| a * b).sum();
                        db.data_mut()[p] = gs.iter().copied().sum();
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
            }
            Op::RepeatBatch { x, n } => {
                let per = g.numel() / n;
                let mut d = Tensor::zeros(self.shape(*x));
                for s in 0..*n {
                    for (a, &b) in d.data_mut().iter_mut().zip(&g.data()[s * per..(s + 1) * per]) {
                        *a += b;
                    }
                }
                acc(*x, d);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xt.dim(0), xt.dim(1), wt.dim(1));
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    crate::tensor::gemm(m, n, k, g.data(), false, wt.data(), true, dx.data_mut(), T::zero());
                    acc(*x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wt.shape());
                    crate::tensor::gemm(k, m, n, xt.data(), true, g.data(), false, dw.data_mut(), T::zero());
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[n]);
                        for row in g.data().chunks(n) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Concat1(parts) => {
                let (outer, total, inner) = split_axis1(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let pc = shape[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * pc * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + pc * inner]);
                        }
                        acc(p, Tensor::from_vec(&shape, d).expect("part shape"));
                    }
                    offset += pc;
                }
            }
            Op::Narrow1 { x, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, c, inner) = split_axis1(&shape);
                let len = g.dim(1);
                let mut d = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * c + start) * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::Upsample2x(x) => {
                let (bs, c, h, w) = self.value(*x).dims4();
                let mut d = Tensor::zeros(&[bs, c, h, w]);
                for p in 0..bs * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            d.data_mut()[(p * h + i / 2) * w + j / 2] += g.data()[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Reparam { mu, log_var, eps } => {
                acc(*mu, g.clone());
                if self.ng(*log_var) {
                    let half: T = lit(0.5);
                    let lv = self.value(*log_var);
                    let data = g
                        .data()
                        .iter()
                        .zip(lv.data())
                        .zip(eps.data())
                        .map(|((&gv, &l), &e)| gv * half * (half * l).exp() * e)
                        .collect();
                    acc(*log_var, Tensor::from_vec(lv.shape(), data).expect("shape"));
                }
            }
            Op::KlGaussian { qm, qlv, pm, plv } => {
                let shape = self.shape(*qm).to_vec();
                let bs = shape[0];
                let per = self.value(*qm).numel() / bs;
                let half: T = lit(0.5);
                let (a, b, c, d) = (
                    self.value(*qm).data(),
                    self.value(*qlv).data(),
                    self.value(*pm).data(),
                    self.value(*plv).data(),
                );
                let n = bs * per;
                let (mut gqm, mut gqlv, mut gpm, mut gplv) =
                    (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
                for s in 0..bs {
                    let up = g.data()[s];
                    for i in s * per..(s + 1) * per {
                        let diff = a[i] - c[i];
                        let ip = (-d[i]).exp();
                        let r = (b[i] - d[i]).exp();
                        gqm[i] = up * diff * ip;
                        gpm[i] = -up * diff * ip;
                        gqlv[i] = up * half * (r - T::one());
                        gplv[i] = up * half * (T::one() - r - diff * diff * ip);
                    }
                }
                for (v, data) in [(*qm, gqm), (*qlv, gqlv), (*pm, gpm), (*plv, gplv)] {
                    if self.ng(v) {
                        acc(v, Tensor::from_vec(&shape, data).expect("shape"));
                    }
                }
            }
            Op::GaussianNll { mu, target, log_std } => {
                let m = self.value(*mu);
                let bs = m.dim(0);
                let per = m.numel() / bs;
                let inv_var = (lit::<T>(-2.0) * *log_std).exp();
                let mut d = Tensor::zeros(m.shape());
                for s in 0..bs {
                    let up = g.data()[s];
                    for i in s * per..(s + 1) * per {
                        d.data_mut()[i] = up * inv_var * (m.data()[i] - target.data()[i]);
                    }
                }
                acc(*mu, d);
            }
        }
    }
}

#[cfg(test)]
mod tests;
