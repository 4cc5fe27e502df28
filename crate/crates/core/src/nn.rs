//! Minimal CPU layers with explicit backward passes.
//!
//! Feature maps are `N × H × W × C` (channels last). Convolutions lower to a
//! single GEMM over the whole batch via im2col.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{h}x{w}x{c} tensor",
                data.len()
            )));
        }
        Ok(Tensor { n, h, w, c, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Sample `i` as a flat `H·W·C` slice.
    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.h * self.w * self.c;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.h * self.w * self.c;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Concatenate along channels: `[a | b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.pixels() * c);
    for p in 0..a.pixels() {
        data.extend_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        data.extend_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    Tensor::from_vec(a.n, a.h, a.w, c, data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let second = t.c - first;
    let mut a = Vec::with_capacity(t.pixels() * first);
    let mut b = Vec::with_capacity(t.pixels() * second);
    for p in 0..t.pixels() {
        let row = &t.data[p * t.c..(p + 1) * t.c];
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    (
        Tensor {
            n: t.n,
            h: t.h,
            w: t.w,
            c: first,
            data: a,
        },
        Tensor {
            n: t.n,
            h: t.h,
            w: t.w,
            c: second,
            data: b,
        },
    )
}

/// Add a per-pixel map (`N × H × W × 1`) to every channel of `t`.
pub fn add_map_to_channels(t: &mut Tensor, map: &Tensor) -> Result<()> {
    if (t.n, t.h, t.w, 1) != (map.n, map.h, map.w, map.c) {
        return Err(Error::Shape(format!(
            "map {:?} does not broadcast over {:?}",
            map.shape(),
            t.shape()
        )));
    }
    let c = t.c;
    for (p, &a) in map.data.iter().enumerate() {
        for v in &mut t.data[p * c..(p + 1) * c] {
            *v += a;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn he_normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Param::zeros(name, shape);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in &mut p.value {
            *v = normal.sample(rng) as f32;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum()
    }
}

/// Anything owning trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Row-major `C[m×n] (+)= A[m×k] · B[k×n]`, with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover every index the
    // strides reach (checked by the debug assertions below).
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
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

/// Stride-1 convolution with "same" zero padding; `kernel` is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// `[kernel·kernel·cin, cout]`, rows ordered (ky, kx, ci).
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let fan_in = kernel * kernel * cin;
        Conv2d {
            kernel,
            cin,
            cout,
            weight: Param::he_normal(format!("{name}.weight"), vec![fan_in, cout], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
        }
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (h, w, c) = (x.h, x.w, x.c);
        let k = 9 * c;
        let mut cols = vec![0.0f32; x.pixels() * k];
        for n in 0..x.n {
            let img = x.sample(n);
            for y in 0..h {
                for xx in 0..w {
                    let row = &mut cols[((n * h + y) * w + xx) * k..][..k];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((sy as usize) * w + sx as usize) * c;
                            let dst = (ky * 3 + kx) * c;
                            row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: [usize; 4]) -> Tensor {
        let [nb, h, w, c] = shape;
        let k = 9 * c;
        let mut out = Tensor::zeros(nb, h, w, c);
        for n in 0..nb {
            let img = out.sample_mut(n);
            for y in 0..h {
                for xx in 0..w {
                    let row = &cols[((n * h + y) * w + xx) * k..][..k];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let dst = ((sy as usize) * w + sx as usize) * c;
                            let src = (ky * 3 + kx) * c;
                            for (d, s) in img[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.c != self.cin {
            return Err(Error::Shape(format!(
                "conv {} expects {} channels, got {}",
                self.weight.name, self.cin, x.c
            )));
        }
        let m = x.pixels();
        let k = self.kernel * self.kernel * self.cin;
        let mut y = Tensor::zeros(x.n, x.h, x.w, self.cout);
        for row in y.data.chunks_exact_mut(self.cout) {
            row.copy_from_slice(&self.bias.value);
        }
        let cols;
        let a: &[f32] = if self.kernel == 1 {
            &x.data
        } else {
            cols = self.im2col(x);
            &cols
        };
        gemm(
            m,
            k,
            self.cout,
            a,
            k as isize,
            1,
            &self.weight.value,
            self.cout as isize,
            1,
            1.0,
            &mut y.data,
        );
        Ok(y)
    }

    /// Accumulate parameter gradients and return `∂L/∂x`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let m = x.pixels();
        let k = self.kernel * self.kernel * self.cin;
        let cout = self.cout;
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
            self.bias.zero_grad();
        }
        for row in dy.data.chunks_exact(cout) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let cols;
        let a: &[f32] = if self.kernel == 1 {
            &x.data
        } else {
            cols = self.im2col(x);
            &cols
        };
        // dW[k×cout] += colsᵀ[k×m] · dy[m×cout]
        gemm(
            k,
            m,
            cout,
            a,
            1,
            k as isize,
            &dy.data,
            cout as isize,
            1,
            1.0,
            &mut self.weight.grad,
        );
        // dcols[m×k] = dy[m×cout] · Wᵀ[cout×k]
        let mut dcols = vec![0.0f32; m * k];
        gemm(
            m,
            cout,
            k,
            &dy.data,
            cout as isize,
            1,
            &self.weight.value,
            1,
            cout as isize,
            0.0,
            &mut dcols,
        );
        if self.kernel == 1 {
            Tensor {
                n: x.n,
                h: x.h,
                w: x.w,
                c: x.c,
                data: dcols,
            }
        } else {
            self.col2im(&dcols, x.shape())
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// A chain of convolutions, each optionally followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv2d>,
    pub relu: Vec<bool>,
}

/// Activations retained for the backward pass: the stack input followed by
/// each layer's (post-rectifier) output.
#[derive(Debug, Clone)]
pub struct StackCache {
    acts: Vec<Tensor>,
}

impl StackCache {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("nonempty cache")
    }
}

impl ConvStack {
    /// `channels[i] → channels[i+1]` for each layer.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kernel: usize,
        channels: &[usize],
        relu_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = channels.len() - 1;
        let layers = (0..n)
            .map(|i| Conv2d::new(&format!("{name}.{i}"), kernel, channels[i], channels[i + 1], rng))
            .collect();
        let relu = (0..n).map(|i| i + 1 < n || relu_last).collect();
        ConvStack { layers, relu }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (layer, &r) in self.layers.iter().zip(&self.relu) {
            cur = layer.forward(&cur)?;
            if r {
                relu_inplace(&mut cur);
            }
        }
        Ok(cur)
    }

    pub fn forward_train(&self, x: Tensor) -> Result<StackCache> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (layer, &r) in self.layers.iter().zip(&self.relu) {
            let mut y = layer.forward(acts.last().expect("input"))?;
            if r {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        Ok(StackCache { acts })
    }

    pub fn backward(&mut self, cache: &StackCache, dy: Tensor) -> Tensor {
        let mut grad = dy;
        for l in (0..self.layers.len()).rev() {
            if self.relu[l] {
                for (g, &y) in grad.data.iter_mut().zip(&cache.acts[l + 1].data) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            grad = self.layers[l].backward(&cache.acts[l], &grad);
        }
        grad
    }
}

impl Module for ConvStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Fully connected layer, `weight` is `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            inputs,
            outputs,
            weight: Param::he_normal(format!("{name}.weight"), vec![inputs, outputs], inputs, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![outputs]),
        }
    }

    /// `x` is `[batch, inputs]`.
    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            batch,
            self.inputs,
            self.outputs,
            x,
            self.inputs as isize,
            1,
            &self.weight.value,
            self.outputs as isize,
            1,
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], batch: usize) -> Vec<f32> {
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
            self.bias.zero_grad();
        }
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm(
            self.inputs,
            batch,
            self.outputs,
            x,
            1,
            self.inputs as isize,
            dy,
            self.outputs as isize,
            1,
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = vec![0.0; batch * self.inputs];
        gemm(
            batch,
            self.outputs,
            self.inputs,
            dy,
            self.outputs as isize,
            1,
            &self.weight.value,
            1,
            self.outputs as isize,
            0.0,
            &mut dx,
        );
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Spatial mean per sample and channel: `[N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.h * x.w;
    let mut out = vec![0.0f32; x.n * x.c];
    for n in 0..x.n {
        let o = &mut out[n * x.c..(n + 1) * x.c];
        for px in x.sample(n).chunks_exact(x.c) {
            for (a, v) in o.iter_mut().zip(px) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= hw as f32);
    }
    out
}

pub fn global_avg_pool_backward(d: &[f32], shape: [usize; 4]) -> Tensor {
    let [n, h, w, c] = shape;
    let inv = 1.0 / (h * w) as f32;
    let mut out = Tensor::zeros(n, h, w, c);
    for i in 0..n {
        let g = &d[i * c..(i + 1) * c];
        for px in out.sample_mut(i).chunks_exact_mut(c) {
            for (o, v) in px.iter_mut().zip(g) {
                *o = v * inv;
            }
        }
    }
    out
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], classes: usize, targets: &[usize]) -> (f64, Vec<f32>) {
    let batch = targets.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[t] as f64;
        for (j, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let p = (row[j] as f64 - lse).exp();
            *g = ((p - if j == t { 1.0 } else { 0.0 }) / batch as f64) as f32;
        }
    }
    (loss / batch.max(1) as f64, grad)
}

/// Mean binary cross-entropy with logits over `logits.len()` entries, and
/// its gradient scaled by `scale`.
pub fn bce_with_logits(logits: &[f32], targets: &[bool], scale: f64) -> (f64, Vec<f32>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let x = x as f64;
            let y = if t { 1.0 } else { 0.0 };
            // max(x, 0) − x·y + log(1 + e^{−|x|})
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            let p = 1.0 / (1.0 + (-x).exp());
            ((p - y) / n * scale) as f32
        })
        .collect();
    (loss / n, grad)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-parameter optimizer state, keyed by position in `params_mut()`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        velocity: Vec<Vec<f32>>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        t: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Optimizer::Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        let init = |state: &mut Vec<Vec<f32>>, params: &[&mut Param]| {
            if state.len() != params.len() {
                *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
        };
        match self {
            Optimizer::Sgd {
                lr,
                momentum,
                weight_decay,
                velocity,
            } => {
                init(velocity, params);
                let (lr, mu, wd) = (*lr as f32, *momentum as f32, *weight_decay as f32);
                for (p, vel) in params.iter_mut().zip(velocity.iter_mut()) {
                    if p.grad.len() != p.value.len() {
                        continue;
                    }
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                        let g = g + wd * *w;
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                t,
                m,
                v,
            } => {
                init(m, params);
                init(v, params);
                *t += 1;
                let (b1, b2) = (*beta1 as f32, *beta2 as f32);
                let c1 = 1.0 - beta1.powi(*t as i32) as f32;
                let c2 = 1.0 - beta2.powi(*t as i32) as f32;
                let (lr, eps, wd) = (*lr as f32, *eps as f32, *weight_decay as f32);
                for ((p, mm), vv) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    if p.grad.len() != p.value.len() {
                        continue;
                    }
                    for (((w, &g), a), b) in p
                        .value
                        .iter_mut()
                        .zip(&p.grad)
                        .zip(mm.iter_mut())
                        .zip(vv.iter_mut())
                    {
                        let g = g + wd * *w;
                        *a = b1 * *a + (1.0 - b1) * g;
                        *b = b2 * *b + (1.0 - b2) * g * g;
                        *w -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
