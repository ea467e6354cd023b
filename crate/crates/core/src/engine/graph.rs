use super::kernels::{split_axis, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { x: Var, axis: usize, index: usize },
    Stack { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var, axis: usize },
    Reverse { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, scale: Vec<T>, train: bool },
    Mse { pred: Var, target: Var },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch-norm call, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Recorded computation of one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape checked")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `x[..., n] + b[n]`, the single broadcasting operation.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(bias).for_each(|(d, &bb)| *d += bb);
        }
        let v = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBias(x, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// `x [.., in] · w [in, out] + b [out]`; leading axes are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().ok_or_else(|| Error::shape("linear", &shape, self.shape(w)))?;
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, inner])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.shape(w)[1]);
        self.reshape(y, &out_shape)
    }

    // ---- normalisation -------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut mx = T::neg_infinity();
                for d in 0..dim {
                    mx = mx.max(src[base + d * inner]);
                }
                let mut total = T::zero();
                for d in 0..dim {
                    let e = (src[base + d * inner] - mx).exp();
                    out[base + d * inner] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[base + d * inner] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Batch normalisation over every axis except axis 1 (channels).
    ///
    /// In training mode the batch statistics are used and returned; in
    /// evaluation mode `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (bs, ch) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let count = T::of((bs * sp) as f64);
        let src = self.value(x).data();
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::shape("batch_norm running", &[ch], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for b in 0..bs {
                    for c in 0..ch {
                        let s = &src[(b * ch + c) * sp..(b * ch + c + 1) * sp];
                        mean[c] += s.iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..bs {
                    for c in 0..ch {
                        let s = &src[(b * ch + c) * sp..(b * ch + c + 1) * sp];
                        var[c] += s.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
        };
        let scale: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..bs {
            for c in 0..ch {
                let off = (b * ch + c) * sp;
                for i in off..off + sp {
                    let h = (src[i] - mean[c]) * scale[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + be[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                scale,
                train,
            },
            rg,
        );
        let stats = train.then_some(BatchNormStats { mean, var });
        Ok((v, stats))
    }

    // ---- losses / reductions -----------------------------------------

    /// Element-mean squared error, a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::of(p.len().max(1) as f64);
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                let src = self.value(x).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::shape("select", &shape, &[axis, index]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Select { x, axis, index }, rg))
    }

    /// Stacks equally shaped arrays along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis > first.len() {
            return Err(Error::shape("stack", &first, &[axis]));
        }
        for &x in xs {
            if self.shape(x) != first.as_slice() {
                return Err(Error::shape("stack", &first, self.shape(x)));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &x in xs {
                out.extend_from_slice(&self.value(x).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape.insert(axis, xs.len());
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Stack { xs: xs.to_vec(), axis }, rg))
    }

    /// Inserts a new axis of length `n` holding copies of `x`.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let first = self.shape(x).to_vec();
        if axis > first.len() {
            return Err(Error::shape("expand", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner * n);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape.insert(axis, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Expand { x, axis }, rg))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reverse", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            for d in (0..dim).rev() {
                let base = (o * dim + d) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Reverse { x, axis }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    // ---- convolution / pooling ---------------------------------------

    /// N-d convolution. `x: [B, Ci, sp...]`, `w: [Co, Ci, k...]`, `b: [Co]`.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let nd = sx.len().saturating_sub(2);
        if nd == 0 || sw.len() != nd + 2 || sx[1] != sw[1] || stride.len() != nd || pad.len() != nd {
            return Err(Error::shape("conv", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(&sx[2..], &sw[2..], stride, pad)
            .ok_or_else(|| Error::shape("conv: input shorter than kernel", &sx, &sw))?;
        let (bs, ci, co) = (sx[0], sx[1], sw[0]);
        let (p, k) = (geom.out_size(), geom.k_size());
        let mut out = vec![T::zero(); bs * co * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let cols = if geom.has_runs() && co <= DIRECT_CONV_MAX_OUT {
            geom.direct_forward(self.value(x).data(), self.value(w).data(), &mut out, bs, ci, co);
            if let Some(bv) = &bias {
                for (chunk, &bb) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bb);
                }
            }
            Vec::new()
        } else {
            let cols = geom.im2col(self.value(x).data(), bs, ci);
            // [B*P, Ci*K] x [Ci*K, Co]
            let mut flat = vec![T::zero(); bs * p * co];
            T::gemm(bs * p, ci * k, co, &cols, false, self.value(w).data(), true, &mut flat, false);
            for bi in 0..bs {
                for pi in 0..p {
                    let row = &flat[(bi * p + pi) * co..(bi * p + pi + 1) * co];
                    for (c, &v) in row.iter().enumerate() {
                        let bb = bias.as_ref().map_or(T::zero(), |bv| bv[c]);
                        out[(bi * co + c) * p + pi] = v + bb;
                    }
                }
            }
            cols
        };
        let mut shape = vec![bs, co];
        shape.extend_from_slice(&geom.out_sp);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// `[B, C, T]` max pooling with window `k` and stride `s`.
    pub fn max_pool1d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[2] < k || k == 0 || s == 0 {
            return Err(Error::shape("max_pool1d", &shape, &[k, s]));
        }
        let (bs, ch, t) = (shape[0], shape[1], shape[2]);
        let to = (t - k) / s + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(bs * ch * to);
        let mut argmax = Vec::with_capacity(bs * ch * to);
        for row in 0..bs * ch {
            for o in 0..to {
                let base = row * t + o * s;
                let mut best = base;
                for i in base + 1..base + k {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[bs, ch, to], out)?, Op::MaxPool1d { x, argmax }, rg))
    }

    /// Non-overlapping average pooling over the spatial axes of
    /// `[B, C, sp...]`; trailing remainders are dropped.
    pub fn avg_pool(&mut self, x: Var, kernel: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len().saturating_sub(2);
        if nd == 0 || kernel.len() != nd {
            return Err(Error::shape("avg_pool", &shape, kernel));
        }
        let geom = ConvGeom::new(&shape[2..], kernel, kernel, &vec![0; nd])
            .ok_or_else(|| Error::shape("avg_pool", &shape, kernel))?;
        let (rows, s, p) = (shape[0] * shape[1], geom.in_size(), geom.out_size());
        let norm = T::one() / T::of(geom.k_size() as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * p];
        for r in 0..rows {
            let plane = &src[r * s..(r + 1) * s];
            for pi in 0..p {
                out[r * p + pi] = geom.taps(pi).map(|t| plane[t]).sum::<T>() * norm;
            }
        }
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend_from_slice(&geom.out_sp);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::AvgPool { x, geom }, rg))
    }

    /// Mean over all spatial axes: `[B, C, sp...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let pooled = self.avg_pool(x, &shape[2..])?;
        self.reshape(pooled, &shape[..2])
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from scalar `loss`. Gradients accumulate additively
    /// into every node that requires them; a second call on the same graph
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward: loss must be scalar", self.shape(loss), &[1]));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g);
            // Interior gradients are kept for inspection.
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Unit-stride convolutions with at most this many output channels skip
/// the column buffer.
const DIRECT_CONV_MAX_OUT: usize = 16;

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn buf<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = buf(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = buf(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = buf(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = buf(nodes, grads, *a) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * o;
                }
            }
            if let Some(d) = buf(nodes, grads, *b) {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * o;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(d) = buf(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = buf(nodes, grads, *b) {
                let n = d.len();
                for row in g.chunks(n.max(1)) {
                    d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(d) = buf(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(d) = buf(nodes, grads, *a) {
                T::gemm(m, n, k, g, false, val(*b), true, d, true);
            }
            if let Some(d) = buf(nodes, grads, *b) {
                T::gemm(k, m, n, val(*a), true, g, false, d, true);
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if let Some(d) = buf(nodes, grads, *a) {
                for i in 0..bs {
                    T::gemm(m, n, k, &g[i * m * n..], false, &val(*b)[i * k * n..], true, &mut d[i * m * k..], true);
                }
            }
            if let Some(d) = buf(nodes, grads, *b) {
                for i in 0..bs {
                    T::gemm(k, m, n, &val(*a)[i * m * k..], true, &g[i * m * n..], false, &mut d[i * k * n..], true);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * (T::one() - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                    if xv > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let (outer, dim, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * dim * inner + j;
                        let dot: T = (0..dim).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..dim {
                            let idx = base + k * inner;
                            d[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let dim = nodes[x.0].value.shape()[*axis];
                if let Some(d) = buf(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                        d[o * dim * inner..(o + 1) * dim * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
                offset += dim;
            }
        }
        Op::Slice { x, axis, start } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let (outer, dim, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    d[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Select { x, axis, index } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let (outer, dim, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                for o in 0..outer {
                    let base = (o * dim + index) * inner;
                    d[base..base + inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Stack { xs, axis } => {
            let shape = nodes[xs[0].0].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis..].iter().product();
            let n = xs.len();
            for (k, &x) in xs.iter().enumerate() {
                if let Some(d) = buf(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                        d[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Op::Expand { x, axis } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let shape = nodes[x.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let n = out.shape()[*axis];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                        d[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Reverse { x, axis } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let (outer, dim, inner) = split_axis(out.shape(), *axis);
                for o in 0..outer {
                    for k in 0..dim {
                        let src = &g[(o * dim + dim - 1 - k) * inner..(o * dim + dim - k) * inner];
                        d[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, out.shape(), &inverse);
                d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Conv { x, w, b, geom, cols } => {
            let sx = nodes[x.0].value.shape();
            let (bs, ci) = (sx[0], sx[1]);
            let co = nodes[w.0].value.shape()[0];
            let (p, k) = (geom.out_size(), geom.k_size());
            if cols.is_empty() {
                if let Some(bv) = b {
                    if let Some(d) = buf(nodes, grads, *bv) {
                        for (chunk, c) in g.chunks(p).zip((0..co).cycle()) {
                            d[c] += chunk.iter().copied().fold(T::zero(), |a, v| a + v);
                        }
                    }
                }
                let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                let mut dw = nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                let mut dx = nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
                geom.direct_backward(xv, wv, g, dw.as_deref_mut(), dx.as_deref_mut(), bs, ci, co);
                if let (Some(src), Some(d)) = (dw, buf(nodes, grads, *w)) {
                    d.iter_mut().zip(&src).for_each(|(d, &v)| *d += v);
                }
                if let (Some(src), Some(d)) = (dx, buf(nodes, grads, *x)) {
                    d.iter_mut().zip(&src).for_each(|(d, &v)| *d += v);
                }
                return;
            }
            // dOut as [B*P, Co]
            let mut gflat = vec![T::zero(); bs * p * co];
            for bi in 0..bs {
                for c in 0..co {
                    let src = &g[(bi * co + c) * p..(bi * co + c + 1) * p];
                    for (pi, &v) in src.iter().enumerate() {
                        gflat[(bi * p + pi) * co + c] = v;
                    }
                }
            }
            if let Some(d) = buf(nodes, grads, *w) {
                // [Co, B*P] x [B*P, Ci*K]
                T::gemm(co, bs * p, ci * k, &gflat, true, cols, false, d, true);
            }
            if let Some(bv) = b {
                if let Some(d) = buf(nodes, grads, *bv) {
                    for row in gflat.chunks(co) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![T::zero(); bs * p * ci * k];
                T::gemm(bs * p, co, ci * k, &gflat, false, val(*w), false, &mut dcols, false);
                if let Some(d) = buf(nodes, grads, *x) {
                    geom.col2im(&dcols, d, bs, ci);
                }
            }
        }
        Op::MaxPool1d { x, argmax } => {
            if let Some(d) = buf(nodes, grads, *x) {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
            }
        }
        Op::AvgPool { x, geom } => {
            if let Some(d) = buf(nodes, grads, *x) {
                let (s, p) = (geom.in_size(), geom.out_size());
                let norm = T::one() / T::of(geom.k_size() as f64);
                let rows = d.len() / s;
                for r in 0..rows {
                    for pi in 0..p {
                        let gv = g[r * p + pi] * norm;
                        for t in geom.taps(pi) {
                            d[r * s + t] += gv;
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            scale,
            train,
        } => {
            let shape = out.shape();
            let (bs, ch) = (shape[0], shape[1]);
            let sp: usize = shape[2..].iter().product();
            let mut sum_g = vec![T::zero(); ch];
            let mut sum_gx = vec![T::zero(); ch];
            for bi in 0..bs {
                for c in 0..ch {
                    let off = (bi * ch + c) * sp;
                    for j in off..off + sp {
                        sum_g[c] += g[j];
                        sum_gx[c] += g[j] * xhat[j];
                    }
                }
            }
            if let Some(d) = buf(nodes, grads, *gamma) {
                d.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
            }
            if let Some(d) = buf(nodes, grads, *beta) {
                d.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
            }
            let gm = nodes[gamma.0].value.data();
            if let Some(d) = buf(nodes, grads, *x) {
                let count = T::of((bs * sp) as f64);
                for bi in 0..bs {
                    for c in 0..ch {
                        let off = (bi * ch + c) * sp;
                        let k = gm[c] * scale[c];
                        for j in off..off + sp {
                            d[j] += if *train {
                                k * (g[j] - sum_g[c] / count - xhat[j] * sum_gx[c] / count)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let (p, t) = (val(*pred), val(*target));
            let c = g[0] * T::of(2.0) / T::of(p.len().max(1) as f64);
            if let Some(d) = buf(nodes, grads, *pred) {
                for ((d, &a), &b) in d.iter_mut().zip(p).zip(t) {
                    *d += c * (a - b);
                }
            }
            if let Some(d) = buf(nodes, grads, *target) {
                for ((d, &a), &b) in d.iter_mut().zip(p).zip(t) {
                    *d -= c * (a - b);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
