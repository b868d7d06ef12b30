//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; nodes only reference
//! earlier nodes, so the tape is acyclic by construction and reverse index
//! order is a valid topological order for backpropagation.

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{col2im, gemm, im2col, Window};
use super::params::{ParamId, ParamStore};
use super::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvOpts {
    pub fn same(k: usize) -> Self {
        ConvOpts {
            stride: 1,
            pad: k / 2,
            dilation: 1,
        }
    }
    pub fn dilated(k: usize, dilation: usize) -> Self {
        ConvOpts {
            stride: 1,
            pad: dilation * (k / 2),
            dilation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Vec<f64>,
}

enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    MaxPool {
        x: Var,
        idx: Vec<usize>,
    },
    MaxUnpool {
        x: Var,
        idx: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GlobalAvgPool(Var),
    Broadcast(Var),
    Dropout {
        x: Var,
        keep: Vec<bool>,
        q: f64,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        count: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
    /// Gradient of a registered parameter (None if it did not take part).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }
    pub fn into_param_grads(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    updates: Vec<BufferUpdate>,
    kinks: Option<u64>,
}

fn fnv(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x100_0000_01b3)
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Dimension(format!("{what} expects NCHW, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::Dimension(format!("{what} expects a matrix, got {s:?}"))),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            updates: Vec::new(),
            kinks: None,
        }
    }

    /// Records a fingerprint of every non-smooth branch taken (ReLU signs,
    /// pooling argmaxes), so finite-difference probes can detect kinks.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kinks
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.updates)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.data().iter().all(|v| !v.is_nan()), "NaN produced");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn note_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in bits {
                *h = fnv(*h, b);
            }
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Parameter leaf; each parameter appears at most once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(t.shape(), data).expect("same shape");
        self.push(t, Op::Affine(x, scale))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.kinks.is_some() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.note_kinks(bits.into_iter());
        }
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        if self.kinks.is_some() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.note_kinks(bits.into_iter());
        }
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `x[N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2(self.value(x), "linear input")?;
        let (dout, win) = dims2(self.value(w), "linear weight")?;
        if din != win {
            return Err(Error::Dimension(format!(
                "linear: input width {din} but weight expects {win}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Dimension(format!(
                    "linear: bias {:?} for {dout} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let t = Tensor::new(&[n, dout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[K,C,kh,kw]` plus `b[K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (k, wc, kh, kw) = dims4(self.value(w), "conv2d weight")?;
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Invalid("conv2d: stride and dilation must be positive".into()));
        }
        let span_h = opts.dilation * (kh - 1) + 1;
        let span_w = opts.dilation * (kw - 1) + 1;
        let (ph, pw) = (h + 2 * opts.pad, wd + 2 * opts.pad);
        if ph < span_h || pw < span_w || (ph - span_h) % opts.stride != 0 || (pw - span_w) % opts.stride != 0 {
            return Err(Error::Dimension(format!(
                "conv2d: {h}x{wd} input with kernel {kh}x{kw}, stride {}, pad {}, dilation {} gives a fractional output",
                opts.stride, opts.pad, opts.dilation
            )));
        }
        self.check_bias(b, k, "conv2d")?;
        let win = Window {
            channels: c,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.pad,
            dilation: opts.dilation,
            out_h: (ph - span_h) / opts.stride + 1,
            out_w: (pw - span_w) / opts.stride + 1,
        };
        let out_plane = win.cols();
        let mut out = vec![0.0; n * k * out_plane];
        let mut cols = if win.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; win.rows() * win.cols()]
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        for i in 0..n {
            let xi = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            let oi = &mut out[i * k * out_plane..(i + 1) * k * out_plane];
            if let Some(bias) = bias {
                for (row, &bv) in oi.chunks_mut(out_plane).zip(bias) {
                    row.fill(bv);
                }
            }
            let src: &[f64] = if win.is_pointwise() {
                xi
            } else {
                im2col(xi, &win, &mut cols);
                &cols
            };
            gemm(k, win.rows(), out_plane, ws, false, src, false, oi, if b.is_some() { 1.0 } else { 0.0 });
        }
        let t = Tensor::new(&[n, k, win.out_h, win.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, win }))
    }

    /// Transposed convolution (no padding): `x[N,C,H,W]`, `w[C,K,kh,kw]`,
    /// output `[N, K, (H-1)*stride + kh, (W-1)*stride + kw]`. It is the
    /// adjoint of [`Tape::conv2d`] with the same weight and stride.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv_transpose2d input")?;
        let (wc, k, kh, kw) = dims4(self.value(w), "conv_transpose2d weight")?;
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv_transpose2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv_transpose2d: stride must be positive".into()));
        }
        self.check_bias(b, k, "conv_transpose2d")?;
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // Window of the forward convolution that maps the output back onto x.
        let win = Window {
            channels: k,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad: 0,
            dilation: 1,
            out_h: h,
            out_w: wd,
        };
        let plane_in = h * wd;
        let plane_out = oh * ow;
        let mut out = vec![0.0; n * k * plane_out];
        let mut cols = vec![0.0; win.rows() * win.cols()];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for i in 0..n {
            let xi = &xs[i * c * plane_in..(i + 1) * c * plane_in];
            gemm(win.rows(), c, plane_in, ws, true, xi, false, &mut cols, 0.0);
            let oi = &mut out[i * k * plane_out..(i + 1) * k * plane_out];
            col2im(&cols, &win, oi);
            if let Some(b) = b {
                for (row, &bv) in oi.chunks_mut(plane_out).zip(self.value(b).data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(&[n, k, oh, ow], out)?;
        Ok(self.push(t, Op::ConvTranspose { x, w, b, win }))
    }

    fn check_bias(&self, b: Option<Var>, k: usize, what: &str) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [k] => Err(Error::Dimension(format!(
                "{what}: bias {:?} for {k} output channels",
                self.shape(b)
            ))),
            _ => Ok(()),
        }
    }

    /// Max pooling returning per-plane flat argmax indices. Ties keep the
    /// first element in row-major window order.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<(Var, Vec<usize>)> {
        let (n, c, h, w) = dims4(self.value(x), "max_pool")?;
        if k == 0 || stride == 0 || h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::Dimension(format!(
                "max_pool: {h}x{w} is not tiled by window {k} at stride {stride}"
            )));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for plane in xs.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let j = (oy * stride + dy) * w + ox * stride + dx;
                            if plane[j] > plane[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(plane[best]);
                    idx.push(best);
                }
            }
        }
        let bits: Vec<u64> = if self.kinks.is_some() {
            idx.iter().map(|&i| i as u64).collect()
        } else {
            Vec::new()
        };
        self.note_kinks(bits.into_iter());
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        let v = self.push(t, Op::MaxPool { x, idx: idx.clone() });
        Ok((v, idx))
    }

    /// Scatters `x` into zero planes of size `out_h x out_w` at `indices`.
    pub fn max_unpool(&mut self, x: Var, indices: &[usize], out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "max_unpool")?;
        if indices.len() != n * c * h * w {
            return Err(Error::Dimension(format!(
                "max_unpool: {} indices for {} values",
                indices.len(),
                n * c * h * w
            )));
        }
        let plane = out_h * out_w;
        if let Some(&bad) = indices.iter().find(|&&i| i >= plane) {
            return Err(Error::Bounds(format!(
                "max_unpool: index {bad} outside a {out_h}x{out_w} plane"
            )));
        }
        let mut out = vec![0.0; n * c * plane];
        let xs = self.value(x).data();
        for (p, (vals, ids)) in xs.chunks(h * w).zip(indices.chunks(h * w)).enumerate() {
            let dst = &mut out[p * plane..(p + 1) * plane];
            for (&v, &i) in vals.iter().zip(ids) {
                dst[i] = v;
            }
        }
        let t = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(
            t,
            Op::MaxUnpool {
                x,
                idx: indices.to_vec(),
            },
        ))
    }

    /// Per-channel batch normalization of `x[N,C,H,W]`.
    ///
    /// Training mode normalizes with the (biased) batch statistics and queues
    /// a running-statistics update (momentum 0.1); evaluation mode uses the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xs = self.value(x).data();
        let mut queued = Vec::new();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xs[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xs[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                    var[ch] = ss / m;
                }
                let (rm, rv) = running;
                let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                    old.iter()
                        .zip(new)
                        .map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v)
                        .collect()
                };
                let new_mean = blend(self.store.value(rm).data(), &mean);
                let new_var = blend(self.store.value(rv).data(), &var);
                queued = vec![
                    BufferUpdate { id: rm, value: new_mean },
                    BufferUpdate { id: rv, value: new_var },
                ];
                (mean, var)
            }
            Mode::Eval => (
                self.store.value(running.0).data().to_vec(),
                self.store.value(running.1).data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for j in r {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        self.updates.extend(queued);
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let inner: usize = t.shape()[axis..].iter().product();
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, 1)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "global_avg_pool")?;
        let plane = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// `[N,C,1,1] -> [N,C,H,W]` by replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = dims4(self.value(x), "broadcast_spatial")?;
        if ih != 1 || iw != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_spatial expects 1x1 maps, got {ih}x{iw}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(t, Op::Broadcast(x)))
    }

    /// Inverted dropout: in training mode zeroes each element with
    /// probability `p` and scales survivors by `1/(1-p)`. Evaluation mode
    /// (or `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let q = 1.0 - p;
        let keep: Vec<bool> = (0..self.value(x).numel())
            .map(|_| rng.gen::<f64>() >= p)
            .collect();
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v / q } else { 0.0 })
            .collect();
        let t = Tensor::new(t.shape(), data)?;
        Ok(self.push(t, Op::Dropout { x, keep, q }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "slice_cols")?;
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of width {d}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let out = (0..n)
            .flat_map(|i| src[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[n, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean squared error over elements where `valid` is true.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], valid: &[bool]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || valid.len() != n {
            return Err(Error::Dimension(format!(
                "masked_mse: prediction has {n} elements, target {}, mask {}",
                target.len(),
                valid.len()
            )));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::EmptyDomain("masked_mse: every element is masked".into()));
        }
        let weight: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let p = self.value(pred).data();
        let mut s = 0.0;
        for i in 0..n {
            if valid[i] {
                s += (p[i] - target[i]).powi(2);
            }
        }
        let count = count as f64;
        Ok(self.push(
            Tensor::scalar(s / count),
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                weight,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.store.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params[pid] = grads[v.0].clone();
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Affine(x, scale) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g)
            }),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if vx[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                })
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += if vx[j] > 0.0 { g[j] } else { slope * g[j] };
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Linear { x, w, b } => {
                let shape_x = self.nodes[x.0].value.shape();
                let (n, din) = (shape_x[0], shape_x[1]);
                let dout = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| gemm(n, dout, din, g, false, vw, false, d, 1.0));
                acc(*w, &mut |d| gemm(dout, n, din, g, true, vx, false, d, 1.0));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, win } => {
                let n = node.value.shape()[0];
                let k = node.value.shape()[1];
                let plane_out = win.cols();
                let plane_in = win.channels * win.in_h * win.in_w;
                let (vx, vw) = (val(*x), val(*w));
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut dw = vec![0.0; vw.len()];
                let mut dx = vec![0.0; vx.len()];
                for s in 0..n {
                    let gs = &g[s * k * plane_out..(s + 1) * k * plane_out];
                    let xs = &vx[s * plane_in..(s + 1) * plane_in];
                    let dxs = &mut dx[s * plane_in..(s + 1) * plane_in];
                    if win.is_pointwise() {
                        gemm(k, plane_out, win.rows(), gs, false, xs, true, &mut dw, 1.0);
                        gemm(win.rows(), k, plane_out, vw, true, gs, false, dxs, 1.0);
                    } else {
                        im2col(xs, win, &mut cols);
                        gemm(k, plane_out, win.rows(), gs, false, &cols, true, &mut dw, 1.0);
                        gemm(win.rows(), k, plane_out, vw, true, gs, false, &mut cols, 0.0);
                        col2im(&cols, win, dxs);
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
                if let Some(b) = b {
                    acc(*b, &mut |d| channel_sums_into(d, g, k, plane_out));
                }
            }
            Op::ConvTranspose { x, w, b, win } => {
                let shape_x = self.nodes[x.0].value.shape();
                let (n, c) = (shape_x[0], shape_x[1]);
                let k = win.channels;
                let plane_in = win.cols();
                let plane_out = win.in_h * win.in_w;
                let (vx, vw) = (val(*x), val(*w));
                let mut cols = vec![0.0; win.rows() * win.cols()];
                let mut dw = vec![0.0; vw.len()];
                let mut dx = vec![0.0; vx.len()];
                for s in 0..n {
                    let gs = &g[s * k * plane_out..(s + 1) * k * plane_out];
                    im2col(gs, win, &mut cols);
                    let xs = &vx[s * c * plane_in..(s + 1) * c * plane_in];
                    gemm(c, win.rows(), plane_in, vw, false, &cols, false, &mut dx[s * c * plane_in..(s + 1) * c * plane_in], 1.0);
                    gemm(c, plane_in, win.rows(), xs, false, &cols, true, &mut dw, 1.0);
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
                if let Some(b) = b {
                    acc(*b, &mut |d| channel_sums_into(d, g, k, plane_out));
                }
            }
            Op::MaxPool { x, idx } => {
                let sx = self.nodes[x.0].value.shape();
                let plane_in = sx[2] * sx[3];
                let plane_out = node.value.shape()[2] * node.value.shape()[3];
                acc(*x, &mut |d| {
                    for (j, &src) in idx.iter().enumerate() {
                        let p = j / plane_out;
                        d[p * plane_in + src] += g[j];
                    }
                })
            }
            Op::MaxUnpool { x, idx } => {
                let sx = self.nodes[x.0].value.shape();
                let plane_in = sx[2] * sx[3];
                let plane_out = node.value.shape()[2] * node.value.shape()[3];
                acc(*x, &mut |d| {
                    for (j, &dst) in idx.iter().enumerate() {
                        let p = j / plane_in;
                        d[j] += g[p * plane_out + dst];
                    }
                })
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = node.value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gm = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let m = (n * plane) as f64;
                acc(*x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gm[ch] * inv_std[ch];
                            for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                                d[j] += if *train {
                                    scale * (g[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                });
                acc(*gamma, &mut |d| add_into(d, &dgamma));
                acc(*beta, &mut |d| add_into(d, &dbeta));
            }
            Op::Concat { xs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let total_inner: usize = node.value.shape()[*axis..].iter().product();
                for &v in xs {
                    let inner: usize = self.nodes[v.0].value.shape()[*axis..].iter().product();
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total_inner + offset..o * total_inner + offset + inner];
                            add_into(&mut d[o * inner..(o + 1) * inner], src);
                        }
                    });
                    offset += inner;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                acc(*x, &mut |d| {
                    for (p, chunk) in d.chunks_mut(plane).enumerate() {
                        let gv = g[p] / plane as f64;
                        chunk.iter_mut().for_each(|v| *v += gv);
                    }
                })
            }
            Op::Broadcast(x) => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                acc(*x, &mut |d| {
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        d[p] += chunk.iter().sum::<f64>();
                    }
                })
            }
            Op::Dropout { x, keep, q } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    if keep[j] {
                        d[j] += g[j] / q;
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::SliceCols { x, start } => {
                let d_in = self.nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * d_in + start..r * d_in + start + len], row);
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MaskedMse {
                pred,
                target,
                weight,
                count,
            } => {
                let p = val(*pred);
                acc(*pred, &mut |d| {
                    for j in 0..d.len() {
                        if weight[j] != 0.0 {
                            d[j] += g[0] * 2.0 * (p[j] - target[j]) / count;
                        }
                    }
                })
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn channel_sums_into(d: &mut [f64], g: &[f64], k: usize, plane: usize) {
    for (j, chunk) in g.chunks(plane).enumerate() {
        d[j % k] += chunk.iter().sum::<f64>();
    }
}
