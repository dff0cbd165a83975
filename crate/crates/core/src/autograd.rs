//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse. Leaves created with `requires_grad = false` (frozen
//! parameters, data, detached values) never receive gradients, and nothing
//! upstream of them is visited.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param, shape, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::math;
use crate::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;
/// Norms below this make a cosine similarity degenerate (defined as 0).
pub const COSINE_EPS: f64 = 1e-12;
/// Variance floor of [`Tape::row_norm`].
pub const ROW_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    SliceFirst(Var, usize),
    ConcatFirst(Vec<Var>),
    ConcatChannels(Vec<Var>),
    Conv2d(Var, Var, Var, ConvGeom),
    ConvTranspose2d(Var, Var, Var),
    MeanAbsDiff(Var, Var),
    Bce(Var, Var),
    KlSoftmax(Var, Var),
    Cosine(Var, Var),
    Outer(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Standardizes each row of `a: [B, C]` to zero mean and unit variance
    /// (no learned scale or shift).
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let c = match *self.shape(a) {
            [_, c] if c >= 2 => c,
            ref other => return Err(shape("row_norm", format!("expected [B, C>=2], got {other:?}"))),
        };
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(v + ROW_NORM_EPS);
            for x in row.iter_mut() {
                *x = (*x - m) * inv;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RowNorm(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sum of several equally shaped values.
    pub fn add_all(&mut self, vs: &[Var]) -> Result<Var> {
        let (&first, rest) = vs
            .split_first()
            .ok_or_else(|| param("add_all of an empty list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape("matmul", format!("{:?} · {:?}", sa, sb))),
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(new_shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Rows `start..start+len` of the leading axis (rank preserved).
    pub fn slice_first(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape("slice_first", format!("{start}+{len} of {:?}", s)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut ns = s.clone();
        ns[0] = len;
        let out = Tensor::new(&ns, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceFirst(a, start), rg))
    }

    /// Row `i` of the leading axis with that axis removed.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = self.slice_first(a, i, 1)?;
        self.reshape(r, &s[1..])
    }

    /// Concatenation along the leading axis.
    pub fn concat_first(&mut self, vs: &[Var]) -> Result<Var> {
        let first = self.shape(*vs.first().ok_or_else(|| param("empty concat"))?).to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &v in vs {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape("concat_first", format!("{:?} vs {:?}", s, first)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut ns = first.clone();
        ns[0] = lead;
        let out = Tensor::new(&ns, data)?;
        let rg = self.rg(vs);
        Ok(self.push(out, Op::ConcatFirst(vs.to_vec()), rg))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, vs: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(vs.len());
        for &v in vs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            rows.push(self.reshape(v, &s)?);
        }
        self.concat_first(&rows)
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat_channels(&mut self, vs: &[Var]) -> Result<Var> {
        let (b, _, h, w) = self.value(vs[0]).dims4()?;
        let mut chans = Vec::with_capacity(vs.len());
        for &v in vs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(shape("concat_channels", format!("{:?}", self.shape(v))));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = vec![0.0; b * total * hw];
        for n in 0..b {
            let mut off = 0;
            for (&v, &c) in vs.iter().zip(&chans) {
                let src = &self.value(v).data()[n * c * hw..(n + 1) * c * hw];
                let dst = (n * total + off) * hw;
                data[dst..dst + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        let out = Tensor::new(&[b, total, h, w], data)?;
        let rg = self.rg(vs);
        Ok(self.push(out, Op::ConcatChannels(vs.to_vec()), rg))
    }

    /// 2-D convolution, `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || self.shape(b) != [cout] || stride == 0 {
            return Err(shape(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let g = ConvGeom { stride, pad };
        let (oh, ow) = conv_out(h, wd, k, g);
        let ck = cin * k * k;
        let ohw = oh * ow;
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * cout * ohw];
        let mut cols = vec![0.0; ck * ohw];
        for n in 0..bs {
            im2col(&xv[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h, wd, k, g, &mut cols);
            let o = &mut out[n * cout * ohw..(n + 1) * cout * ohw];
            for (co, chunk) in o.chunks_mut(ohw).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm_nn(cout, ck, ohw, wv, &cols, o);
        }
        let out = Tensor::new(&[bs, cout, oh, ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d(x, w, b, g), rg))
    }

    /// Transposed convolution with kernel size equal to stride (no overlap),
    /// `x: [B,Cin,H,W]`, `w: [Cin,Cout,k,k]` → `[B,Cout,H·k,W·k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || self.shape(b) != [cout] {
            return Err(shape(
                "conv_transpose2d",
                format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let hw = h * wd;
        let ckk = cout * k * k;
        let (oh, ow) = (h * k, wd * k);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bs * cout * oh * ow];
        let mut cols = vec![0.0; ckk * hw];
        for n in 0..bs {
            cols.fill(0.0);
            gemm_tn(ckk, cin, hw, wv, &xv[n * cin * hw..(n + 1) * cin * hw], &mut cols);
            let o = &mut out[n * cout * oh * ow..(n + 1) * cout * oh * ow];
            for co in 0..cout {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &cols[((co * k + ky) * k + kx) * hw..][..hw];
                        for y in 0..h {
                            let base = co * oh * ow + (y * k + ky) * ow + kx;
                            for xx in 0..wd {
                                o[base + xx * k] = row[y * wd + xx] + bv[co];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bs, cout, oh, ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d(x, w, b), rg))
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against targets `y`.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        self.same_shape("ce_loss", p, y)?;
        let vp = self.value(p).data();
        let vy = self.value(y).data();
        let mut s = 0.0;
        for (&pp, &yy) in vp.iter().zip(vy) {
            let q = pp.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s -= yy * math::ln(q) + (1.0 - yy) * math::ln(1.0 - q);
        }
        let out = Tensor::scalar(s / vp.len() as f64);
        let rg = self.rg(&[p, y]);
        Ok(self.push(out, Op::Bce(p, y), rg))
    }

    /// `KL(softmax(target) ‖ softmax(approx))` over 1-D logits.
    pub fn kl_softmax(&mut self, target: Var, approx: Var) -> Result<Var> {
        self.same_shape("kl_div", target, approx)?;
        if self.value(target).rank() != 1 {
            return Err(shape("kl_div", format!("expected vectors, got {:?}", self.shape(target))));
        }
        let lp = log_softmax(self.value(target).data());
        let lq = log_softmax(self.value(approx).data());
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| math::exp(*a) * (a - b)).sum();
        let rg = self.rg(&[target, approx]);
        Ok(self.push(Tensor::scalar(kl), Op::KlSoftmax(target, approx), rg))
    }

    /// Cosine similarity of two equally sized tensors, flattened.
    /// Degenerate norms give 0 with zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape("cosine_similarity", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let c = cosine_values(self.value(a).data(), self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// `vᵀv` for a vector `v` of width C, giving a C × C matrix.
    pub fn outer(&mut self, v: Var) -> Result<Var> {
        if self.value(v).rank() != 1 {
            return Err(shape("outer_node", format!("expected a vector, got {:?}", self.shape(v))));
        }
        let d = self.value(v).data();
        let c = d.len();
        let mut out = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                out[i * c + j] = d[i] * d[j];
            }
        }
        let out = Tensor::new(&[c, c], out)?;
        let rg = self.rg(&[v]);
        Ok(self.push(out, Op::Outer(v), rg))
    }

    /// Back-propagates from the scalar `root`. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&Tape) -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let delta = f(self);
        match &mut self.grads[v.0] {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |_| g.clone());
                self.acc(b, |_| g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, |_| g.clone());
                self.acc(b, |_| g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(a, |t| zip(g, t.value(b), |x, y| x * y));
                self.acc(b, |t| zip(g, t.value(a), |x, y| x * y));
            }
            Op::Scale(a, k) => self.acc(a, |_| g.map(|x| x * k)),
            Op::Relu(a) => self.acc(a, |t| zip(g, t.value(a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.clone();
                self.acc(a, |_| zip(g, &y, |x, s| x * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.clone();
                self.acc(a, |_| zip(g, &y, |x, t| x * (1.0 - t * t)));
            }
            Op::RowNorm(a) => {
                let y = self.nodes[i].value.clone();
                let c = *y.shape().last().unwrap();
                let x = self.value(a).clone();
                let mut dx = g.clone();
                for ((dr, yr), xr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(x.data().chunks(c)) {
                    let m = xr.iter().sum::<f64>() / c as f64;
                    let v = xr.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / c as f64;
                    let inv = 1.0 / math::sqrt(v + ROW_NORM_EPS);
                    let gm = dr.iter().sum::<f64>() / c as f64;
                    let gy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (d, &yy) in dr.iter_mut().zip(yr) {
                        *d = inv * (*d - gm - yy * gy);
                    }
                }
                self.acc(a, |_| dx);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(a, |t| Tensor::full(t.shape(a), gv));
            }
            Op::Mean(a) => {
                let gv = g.item();
                self.acc(a, |t| {
                    let n = t.value(a).len() as f64;
                    Tensor::full(t.shape(a), gv / n)
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.acc(a, |t| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), t.value(b).data(), &mut d);
                    Tensor::new(&[m, k], d).unwrap()
                });
                self.acc(b, |t| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(k, m, n, t.value(a).data(), g.data(), &mut d);
                    Tensor::new(&[k, n], d).unwrap()
                });
            }
            Op::AddBias(x, b) => {
                self.acc(x, |_| g.clone());
                self.acc(b, |t| {
                    let n = t.shape(b)[0];
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::from_vec(d)
                });
            }
            Op::Reshape(a) => self.acc(a, |t| g.clone().reshape(t.shape(a)).unwrap()),
            Op::SliceFirst(a, start) => self.acc(a, |t| {
                let mut d = Tensor::zeros(t.shape(a));
                let inner: usize = out_shape[1..].iter().product();
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                d
            }),
            Op::ConcatFirst(vs) => {
                let mut off = 0;
                for v in vs {
                    let n = self.value(v).len();
                    let shp = self.shape(v).to_vec();
                    self.acc(v, |_| Tensor::new(&shp, g.data()[off..off + n].to_vec()).unwrap());
                    off += n;
                }
            }
            Op::ConcatChannels(vs) => {
                let (b, total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let hw = h * w;
                let mut off = 0;
                for v in vs {
                    let c = self.shape(v)[1];
                    self.acc(v, |_| {
                        let mut d = vec![0.0; b * c * hw];
                        for n in 0..b {
                            let src = (n * total + off) * hw;
                            d[n * c * hw..(n + 1) * c * hw].copy_from_slice(&g.data()[src..src + c * hw]);
                        }
                        Tensor::new(&[b, c, h, w], d).unwrap()
                    });
                    off += c;
                }
            }
            Op::Conv2d(x, w, b, geom) => self.conv2d_backward(g, x, w, b, geom),
            Op::ConvTranspose2d(x, w, b) => self.conv_t_backward(g, x, w, b),
            Op::MeanAbsDiff(a, b) => {
                let gv = g.item();
                let n = self.value(a).len() as f64;
                let sign = zip(self.value(a), self.value(b), |x, y| {
                    if x > y {
                        gv / n
                    } else if x < y {
                        -gv / n
                    } else {
                        0.0
                    }
                });
                self.acc(b, |_| sign.map(|x| -x));
                self.acc(a, |_| sign);
            }
            Op::Bce(p, y) => {
                let gv = g.item();
                let n = self.value(p).len() as f64;
                self.acc(p, |t| {
                    zip(t.value(p), t.value(y), |pp, yy| {
                        let q = pp.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gv * (-yy / q + (1.0 - yy) / (1.0 - q)) / n
                    })
                });
                self.acc(y, |t| {
                    t.value(p).map(|pp| {
                        let q = pp.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -gv * (math::ln(q) - math::ln(1.0 - q)) / n
                    })
                });
            }
            Op::KlSoftmax(tg, ap) => {
                let gv = g.item();
                let lp = log_softmax(self.value(tg).data());
                let lq = log_softmax(self.value(ap).data());
                let kl = self.nodes[i].value.item();
                self.acc(tg, |_| {
                    Tensor::from_vec(lp.iter().zip(&lq).map(|(a, b)| gv * math::exp(*a) * ((a - b) - kl)).collect())
                });
                self.acc(ap, |_| {
                    Tensor::from_vec(lp.iter().zip(&lq).map(|(a, b)| gv * (math::exp(*b) - math::exp(*a))).collect())
                });
            }
            Op::Cosine(a, b) => {
                let gv = g.item();
                let c = self.nodes[i].value.item();
                let (da, db) = cosine_grads(self.value(a).data(), self.value(b).data(), c);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                self.acc(a, |_| Tensor::new(&sa, da.iter().map(|x| x * gv).collect()).unwrap());
                self.acc(b, |_| Tensor::new(&sb, db.iter().map(|x| x * gv).collect()).unwrap());
            }
            Op::Outer(v) => self.acc(v, |t| {
                let d = t.value(v).data();
                let c = d.len();
                let gd = g.data();
                let mut out = vec![0.0; c];
                for (p, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for q in 0..c {
                        s += (gd[p * c + q] + gd[q * c + p]) * d[q];
                    }
                    *o = s;
                }
                Tensor::from_vec(out)
            }),
        }
    }

    fn conv2d_backward(&mut self, g: &Tensor, x: Var, w: Var, b: Var, geom: ConvGeom) {
        let (bs, cin, h, wd) = self.value(x).dims4().unwrap();
        let (cout, _, k, _) = self.value(w).dims4().unwrap();
        let (oh, ow) = conv_out(h, wd, k, geom);
        let ohw = oh * ow;
        let ck = cin * k * k;
        let gd = g.data();
        self.acc(b, |_| {
            let mut d = vec![0.0; cout];
            for n in 0..bs {
                for (co, dv) in d.iter_mut().enumerate() {
                    *dv += gd[(n * cout + co) * ohw..][..ohw].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(d)
        });
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; ck * ohw];
        let mut dw = vec![0.0; cout * ck];
        let mut dx = vec![0.0; if need_x { bs * cin * h * wd } else { 0 }];
        let mut dcols = vec![0.0; if need_x { ck * ohw } else { 0 }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..bs {
                let gn = &gd[n * cout * ohw..(n + 1) * cout * ohw];
                if need_w {
                    im2col(&xv[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h, wd, k, geom, &mut cols);
                    gemm_nt(cout, ohw, ck, gn, &cols, &mut dw);
                }
                if need_x {
                    dcols.fill(0.0);
                    gemm_tn(ck, cout, ohw, wv, gn, &mut dcols);
                    col2im(&dcols, cin, h, wd, k, geom, &mut dx[n * cin * h * wd..(n + 1) * cin * h * wd]);
                }
            }
        }
        if need_w {
            let s = self.shape(w).to_vec();
            self.acc(w, |_| Tensor::new(&s, dw).unwrap());
        }
        if need_x {
            let s = self.shape(x).to_vec();
            self.acc(x, |_| Tensor::new(&s, dx).unwrap());
        }
    }

    fn conv_t_backward(&mut self, g: &Tensor, x: Var, w: Var, b: Var) {
        let (bs, cin, h, wd) = self.value(x).dims4().unwrap();
        let (_, cout, k, _) = self.value(w).dims4().unwrap();
        let hw = h * wd;
        let ckk = cout * k * k;
        let (oh, ow) = (h * k, wd * k);
        let gd = g.data();
        self.acc(b, |_| {
            let mut d = vec![0.0; cout];
            for n in 0..bs {
                for (co, dv) in d.iter_mut().enumerate() {
                    *dv += gd[(n * cout + co) * oh * ow..][..oh * ow].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(d)
        });
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        if !need_w && !need_x {
            return;
        }
        let mut gcols = vec![0.0; ckk * hw];
        let mut dw = vec![0.0; cin * ckk];
        let mut dx = vec![0.0; if need_x { bs * cin * hw } else { 0 }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..bs {
                let gn = &gd[n * cout * oh * ow..(n + 1) * cout * oh * ow];
                for co in 0..cout {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = &mut gcols[((co * k + ky) * k + kx) * hw..][..hw];
                            for y in 0..h {
                                let base = co * oh * ow + (y * k + ky) * ow + kx;
                                for xx in 0..wd {
                                    row[y * wd + xx] = gn[base + xx * k];
                                }
                            }
                        }
                    }
                }
                if need_w {
                    gemm_nt(cin, hw, ckk, &xv[n * cin * hw..(n + 1) * cin * hw], &gcols, &mut dw);
                }
                if need_x {
                    gemm_nn(cin, ckk, hw, wv, &gcols, &mut dx[n * cin * hw..(n + 1) * cin * hw]);
                }
            }
        }
        if need_w {
            let s = self.shape(w).to_vec();
            self.acc(w, |_| Tensor::new(&s, dw).unwrap());
        }
        if need_x {
            let s = self.shape(x).to_vec();
            self.acc(x, |_| Tensor::new(&s, dx).unwrap());
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + math::ln(z.iter().map(|v| math::exp(v - m)).sum::<f64>());
    z.iter().map(|v| v - lse).collect()
}

pub(crate) fn cosine_values(a: &[f64], b: &[f64]) -> f64 {
    let na = math::sqrt(a.iter().map(|v| v * v).sum());
    let nb = math::sqrt(b.iter().map(|v| v * v).sum());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn cosine_grads(a: &[f64], b: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
    let na = math::sqrt(a.iter().map(|v| v * v).sum());
    let nb = math::sqrt(b.iter().map(|v| v * v).sum());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let inv = 1.0 / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| y * inv - c * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x * inv - c * y / (nb * nb)).collect();
    (da, db)
}

fn conv_out(h: usize, w: usize, k: usize, g: ConvGeom) -> (usize, usize) {
    ((h + 2 * g.pad - k) / g.stride + 1, (w + 2 * g.pad - k) / g.stride + 1)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, g: ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = conv_out(h, w, k, g);
    let ohw = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = conv_out(h, w, k, g);
    let ohw = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
