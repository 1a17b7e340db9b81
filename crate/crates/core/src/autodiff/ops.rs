use super::{conv, fault, pool, Node, Op, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Side {
    A,
    B,
}

/// How the smaller operand of a binary op is spread over the output.
///
/// Only one operand may be smaller; its shape, right-padded with unit
/// extents, must equal the output shape up to singleton axes. That covers a
/// channel vector against a feature map (`C` or `N×C` against `…×C×H×W`)
/// and a spatial map against a feature map (`…×1×H×W` against `…×C×H×W`).
pub(crate) struct Broadcast {
    small: Option<Side>,
    map: Vec<usize>,
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
        if a == b {
            return Ok((
                a.to_vec(),
                Broadcast {
                    small: None,
                    map: Vec::new(),
                },
            ));
        }
        let fits = |big: &[usize], small: &[usize]| {
            small.len() <= big.len()
                && big
                    .iter()
                    .enumerate()
                    .all(|(d, &e)| match small.get(d) {
                        Some(&s) => s == e || s == 1,
                        None => true,
                    })
        };
        let (side, big, small) = if fits(a, b) {
            (Side::B, a, b)
        } else if fits(b, a) {
            (Side::A, b, a)
        } else {
            return Err(Error::dim(
                op,
                format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
            ));
        };
        // Strides of the small operand laid over the big shape; zero on
        // broadcast axes.
        let mut strides = vec![0usize; big.len()];
        let mut acc = 1usize;
        for d in (0..big.len()).rev() {
            let ext = small.get(d).copied().unwrap_or(1);
            strides[d] = if ext == 1 { 0 } else { acc };
            acc *= ext;
        }
        let n = numel(big);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; big.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..big.len()).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < big[d] {
                    break;
                }
                off -= strides[d] * big[d];
                idx[d] = 0;
            }
        }
        Ok((
            big.to_vec(),
            Broadcast {
                small: Some(side),
                map,
            },
        ))
    }

    #[inline]
    fn index(&self, side: Side, i: usize) -> usize {
        if self.small == Some(side) {
            self.map[i]
        } else {
            i
        }
    }

    /// Folds an output-shaped gradient back onto operand `side`.
    fn reduce<T: Real>(&self, side: Side, grad: Vec<T>, shape: &[usize]) -> Tensor<T> {
        if self.small != Some(side) {
            return Tensor::from_parts(shape.to_vec(), grad);
        }
        let mut out = vec![T::zero(); numel(shape)];
        for (i, g) in grad.into_iter().enumerate() {
            out[self.map[i]] += g;
        }
        Tensor::from_parts(shape.to_vec(), out)
    }
}

/// Logistic function, saturating at the representable values nearest to 0
/// and 1 so outputs stay strictly inside the open unit interval.
fn sigmoid<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(below_one)
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'t, T>> {
        self.tape.push(value, op, self.tape.requires_grad(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.unary(v, Op::Reshape { x: self.id })
    }

    /// `[M×K] · [K×N]`.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(Error::dim("matmul", format!("need 2-D operands, got {sa:?} and {sb:?}")))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} × {:?}", a.shape(), b.shape()),
            ));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), [k, 1], b.data(), [n, 1], &mut c, [n, 1], false);
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(rhs.id);
        self.tape.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
            },
            rg,
        )
    }

    /// Fully connected layer: `self[N×In] · weightᵀ + bias`, with
    /// `weight[Out×In]` and `bias[Out]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(weight, "linear")?;
        let (x, w) = (self.value(), weight.value());
        let (n, inp, out, inp2) = match (x.shape(), w.shape()) {
            (&[n, i], &[o, i2]) => (n, i, o, i2),
            (sx, sw) => {
                return Err(Error::dim(
                    "linear",
                    format!("need N×In input and Out×In weight, got {sx:?} and {sw:?}"),
                ))
            }
        };
        if inp != inp2 {
            return Err(Error::dim(
                "linear",
                format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
            ));
        }
        let mut y = vec![T::zero(); n * out];
        T::gemm(n, inp, out, x.data(), [inp, 1], w.data(), [1, inp], &mut y, [out, 1], false);
        let mut rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(weight.id);
        if let Some(b) = bias {
            self.same_tape(b, "linear")?;
            let bv = b.value();
            if bv.shape() != [out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} does not match {out} outputs", bv.shape()),
                ));
            }
            for row in y.chunks_exact_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
            rg |= self.tape.requires_grad(b.id);
        }
        self.tape.push(
            Tensor::from_parts(vec![n, out], y),
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            rg,
        )
    }

    /// 2-D cross-correlation of a `C×H×W` or `N×C×H×W` input with a
    /// `C_out×C_in×kh×kw` kernel.
    pub fn conv2d(&self, kernel: &Var<'t, T>, bias: Option<&Var<'t, T>>, spec: conv::ConvSpec) -> Result<Var<'t, T>> {
        self.same_tape(kernel, "conv2d")?;
        let (x, k) = (self.value(), kernel.value());
        let bv = match bias {
            Some(b) => {
                self.same_tape(b, "conv2d")?;
                Some(b.value())
            }
            None => None,
        };
        let (out, geom, cols) = conv::forward(&x, &k, bv.as_deref(), spec)?;
        let rg = self.tape.requires_grad(self.id)
            || self.tape.requires_grad(kernel.id)
            || bias.is_some_and(|b| self.tape.requires_grad(b.id));
        self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                b: bias.map(|b| b.id),
                geom,
                cols,
            },
            rg,
        )
    }

    pub fn pool(&self, mode: pool::PoolMode) -> Result<Var<'t, T>> {
        let (out, argmax) = pool::forward(&self.value(), mode)?;
        self.unary(
            out,
            Op::Pool {
                x: self.id,
                mode,
                argmax,
            },
        )
    }

    fn binary(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize, Broadcast) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(rhs, name)?;
        let (a, b) = (self.value(), rhs.value());
        let (shape, bc) = Broadcast::plan(name, a.shape(), b.shape())?;
        let n = numel(&shape);
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n)
            .map(|i| f(ad[bc.index(Side::A, i)], bd[bc.index(Side::B, i)]))
            .collect();
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(rhs.id);
        self.tape
            .push(Tensor::from_parts(shape, data), make(self.id, rhs.id, bc), rg)
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, |a, b, bc| Op::Add { a, b, bc })
    }

    /// Elementwise product, broadcasting a channel vector or spatial map.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid { x: self.id })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t, T>> {
        let f = T::of(factor);
        let v = self.value().map(|x| x * f);
        self.unary(v, Op::Scale { x: self.id, factor: f })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum { x: self.id })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so the
    /// inference path is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut RngState, training: bool) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value();
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Dropout { x: self.id, mask },
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// `N×M` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        let (n, m) = match *z.shape() {
            [n, m] => (n, m),
            _ => {
                return Err(Error::dim(
                    "softmax_cross_entropy",
                    format!("logits must be N×M, got {:?}", z.shape()),
                ))
            }
        };
        if n == 0 {
            return Err(Error::Data("softmax_cross_entropy: empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "softmax_cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
            return Err(Error::Data(format!(
                "softmax_cross_entropy: label {l} at row {row} out of range for {m} classes"
            )));
        }
        let mut probs = vec![T::zero(); n * m];
        let mut total = 0.0f64;
        for (i, row) in z.data().chunks_exact(m).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (v - mx).exp();
                s += *p;
            }
            for p in &mut probs[i * m..(i + 1) * m] {
                *p /= s;
            }
            let lse = mx + s.ln();
            total += (lse - row[labels[i]]).f64();
        }
        self.unary(
            Tensor::scalar(T::of(total / n as f64)),
            Op::SoftmaxCe {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("concat", "empty input list"))?;
    if xs.len() == 1 {
        return Ok(*first);
    }
    let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
    let base = vals[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for rank {}", base.len()),
        ));
    }
    for (x, v) in xs.iter().zip(&vals).skip(1) {
        first.same_tape(x, "concat")?;
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("shape {s:?} does not match {base:?} off axis {axis}"),
            ));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let chunks: Vec<usize> = vals.iter().map(|v| v.shape()[axis..].iter().product()).collect();
    let mut shape = base.clone();
    shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (v, &c) in vals.iter().zip(&chunks) {
            data.extend_from_slice(&v.data()[o * c..(o + 1) * c]);
        }
    }
    let tape = first.tape;
    let rg = xs.iter().any(|x| tape.requires_grad(x.id));
    tape.push(
        Tensor::from_parts(shape, data),
        Op::Concat {
            xs: xs.iter().map(|x| x.id).collect(),
            axis,
        },
        rg,
    )
}

/// `dst + gate ⊙ src` over equal shapes: the residual gated fusion used to
/// inject one branch's features into another.
pub fn gated_fuse<'t, T: Real>(dst: &Var<'t, T>, gate: &Var<'t, T>, src: &Var<'t, T>) -> Result<Var<'t, T>> {
    dst.same_tape(gate, "gated_fuse")?;
    dst.same_tape(src, "gated_fuse")?;
    let (d, g, s) = (dst.value(), gate.value(), src.value());
    if d.shape() != g.shape() || d.shape() != s.shape() {
        return Err(Error::dim(
            "gated_fuse",
            format!("extents differ: dst {:?}, gate {:?}, src {:?}", d.shape(), g.shape(), s.shape()),
        ));
    }
    let data = d
        .data()
        .iter()
        .zip(g.data())
        .zip(s.data())
        .map(|((&a, &b), &c)| a + b * c)
        .collect();
    let tape = dst.tape;
    let rg = [dst, gate, src].iter().any(|v| tape.requires_grad(v.id));
    tape.push(
        Tensor::from_parts(d.shape().to_vec(), data),
        Op::Fuse {
            dst: dst.id,
            gate: gate.id,
            src: src.id,
        },
        rg,
    )
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Vector-Jacobian products of node `id` given its output gradient.
pub(super) fn backward_op<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let node = &nodes[id];
    let val = |i: usize| &*nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Reshape { x } => {
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gd.to_vec())));
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, gd, [n, 1], bv.data(), [1, n], &mut da, [k, 1], false);
                out.push((*a, Tensor::from_parts(vec![m, k], da)));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, av.data(), [1, k], gd, [n, 1], &mut db, [n, 1], false);
                out.push((*b, Tensor::from_parts(vec![k, n], db)));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, inp, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            if wants(*x) {
                let mut dx = vec![T::zero(); n * inp];
                T::gemm(n, o, inp, gd, [o, 1], wv.data(), [inp, 1], &mut dx, [inp, 1], false);
                out.push((*x, Tensor::from_parts(vec![n, inp], dx)));
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); o * inp];
                T::gemm(o, n, inp, gd, [1, o], xv.data(), [inp, 1], &mut dw, [inp, 1], false);
                out.push((*w, Tensor::from_parts(vec![o, inp], dw)));
            }
            if let Some(b) = b.filter(|&b| wants(b)) {
                let mut db = vec![T::zero(); o];
                for row in gd.chunks_exact(o) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((b, Tensor::from_parts(vec![o], db)));
            }
        }
        Op::Conv2d { x, k, b, geom, cols } => {
            let grads = conv::backward(
                g,
                val(*k),
                geom,
                cols,
                [wants(*x), wants(*k), b.is_some_and(&wants)],
            );
            if let Some(dx) = grads.0 {
                out.push((*x, dx.reshape(val(*x).shape().to_vec())?));
            }
            if let Some(dk) = grads.1 {
                out.push((*k, dk));
            }
            if let (Some(b), Some(db)) = (b, grads.2) {
                out.push((*b, db));
            }
        }
        Op::Pool { x, mode, argmax } => {
            out.push((*x, pool::backward(g, val(*x).shape(), *mode, argmax)?));
        }
        Op::Add { a, b, bc } => {
            for (side, i) in [(Side::A, *a), (Side::B, *b)] {
                if wants(i) {
                    out.push((i, bc.reduce(side, gd.to_vec(), val(i).shape())));
                }
            }
        }
        Op::Mul { a, b, bc } => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[bc.index(Side::B, i)])
                    .collect();
                out.push((*a, bc.reduce(Side::A, ga, av.shape())));
            }
            if wants(*b) {
                let gb = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * av.data()[bc.index(Side::A, i)])
                    .collect();
                out.push((*b, bc.reduce(Side::B, gb, bv.shape())));
            }
        }
        Op::Relu { x } => {
            let xv = val(*x);
            let d = zip_map(gd, xv.data(), |gi, xi| if xi > T::zero() { gi } else { T::zero() });
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), d)));
        }
        Op::Sigmoid { x } => {
            let y = node.value.data();
            let d = zip_map(gd, y, |gi, yi| gi * yi * (T::one() - yi));
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), d)));
        }
        Op::Scale { x, factor } => {
            let d = gd.iter().map(|&v| v * *factor).collect();
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), d)));
        }
        Op::Sum { x } => {
            out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item())));
        }
        Op::Concat { xs, axis } => {
            let outer: usize = node.value.shape()[..*axis].iter().product();
            let chunks: Vec<usize> = xs.iter().map(|&i| val(i).shape()[*axis..].iter().product()).collect();
            let stride: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&i, &c) in xs.iter().zip(&chunks) {
                if wants(i) {
                    let mut d = Vec::with_capacity(outer * c);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * stride + offset..o * stride + offset + c]);
                    }
                    out.push((i, Tensor::from_parts(val(i).shape().to_vec(), d)));
                }
                offset += c;
            }
        }
        Op::Dropout { x, mask } => {
            let d = zip_map(gd, mask, |gi, m| gi * m);
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), d)));
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let shape = val(*logits).shape().to_vec();
            let (n, m) = (shape[0], shape[1]);
            let scale = g.item() / T::of(n as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * m + l] -= scale;
            }
            out.push((*logits, Tensor::from_parts(shape, d)));
        }
        Op::Fuse { dst, gate, src } => {
            let (gv, sv) = (val(*gate), val(*src));
            let shape = gv.shape().to_vec();
            if wants(*dst) {
                out.push((*dst, g.clone()));
            }
            if wants(*gate) {
                let mut d = zip_map(gd, sv.data(), |gi, s| gi * s);
                if fault::active() == fault::Fault::FlipFuseGateGrad {
                    d.iter_mut().for_each(|v| *v = -*v);
                }
                out.push((*gate, Tensor::from_parts(shape.clone(), d)));
            }
            if wants(*src) {
                out.push((*src, Tensor::from_parts(shape, zip_map(gd, gv.data(), |gi, a| gi * a))));
            }
        }
    }
    Ok(out)
}
