//! Convolution, batch norm and the TDNN layer built from them.
//!
//! Every layer exposes a pure batched `forward` returning a cache, and a
//! `backward` that accumulates parameter gradients into a zero-initialized
//! twin of the layer.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Mat, NamedTensor, NamedTensorMut, Tensor, TensorKind};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn push<'a>(
    out: &mut Vec<NamedTensor<'a>>,
    prefix: &str,
    name: &str,
    tensor: &'a Tensor,
    kind: TensorKind,
) {
    out.push(NamedTensor {
        name: format!("{prefix}.{name}"),
        kind,
        tensor,
    });
}

pub(crate) fn push_mut<'a>(
    out: &mut Vec<NamedTensorMut<'a>>,
    prefix: &str,
    name: &str,
    tensor: &'a mut Tensor,
    kind: TensorKind,
) {
    out.push(NamedTensorMut {
        name: format!("{prefix}.{name}"),
        kind,
        tensor,
    });
}

/// Dilated 1-D convolution over time with zero "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    /// `[out, in, kernel]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        assert!(dilation >= 1, "dilation must be at least 1");
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            weight: Tensor::uniform(&[out_ch, in_ch, kernel], bound, rng),
            bias: Tensor::uniform(&[out_ch], bound, rng),
            dilation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn zeros_like(&self) -> Self {
        Conv1d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            dilation: self.dilation,
        }
    }

    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.kernel() / 2) as isize) * self.dilation as isize
    }

    /// Valid output range `[lo, hi)` for a tap offset over `t` frames.
    fn span(off: isize, t: usize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (t as isize - off.max(0)).max(0) as usize;
        (lo.min(t), hi.max(lo.min(t)))
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.rows != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.rows
            )));
        }
        let (cin, k, t) = (self.in_channels(), self.kernel(), x.cols);
        let mut y = Mat::zeros(self.out_channels(), t);
        for o in 0..self.out_channels() {
            let row = y.row_mut(o);
            row.fill(self.bias.data[o]);
            for i in 0..cin {
                let xr = x.row(i);
                for j in 0..k {
                    let w = self.weight.data[(o * cin + i) * k + j];
                    let off = self.offset(j);
                    let (lo, hi) = Self::span(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for (dst, s) in row[lo..hi].iter_mut().zip(src) {
                        *dst += w * s;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Mat, gy: &Mat, grad: &mut Conv1d) -> Mat {
        let (cin, k, t) = (self.in_channels(), self.kernel(), x.cols);
        let mut gx = Mat::zeros(cin, t);
        for o in 0..self.out_channels() {
            let gr = gy.row(o);
            grad.bias.data[o] += gr.iter().sum::<f64>();
            for i in 0..cin {
                let xr = x.row(i);
                for j in 0..k {
                    let idx = (o * cin + i) * k + j;
                    let w = self.weight.data[idx];
                    let off = self.offset(j);
                    let (lo, hi) = Self::span(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let (a, b) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                    let mut acc = 0.0;
                    for (g, s) in gr[lo..hi].iter().zip(&xr[a..b]) {
                        acc += g * s;
                    }
                    grad.weight.data[idx] += acc;
                    for (dst, g) in gx.row_mut(i)[a..b].iter_mut().zip(&gr[lo..hi]) {
                        *dst += w * g;
                    }
                }
            }
        }
        gx
    }

    pub fn add_assign(&mut self, other: &Conv1d) {
        self.weight.add_assign(&other.weight);
        self.bias.add_assign(&other.bias);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        push(out, prefix, "weight", &self.weight, TensorKind::Param);
        push(out, prefix, "bias", &self.bias, TensorKind::Param);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        push_mut(out, prefix, "weight", &mut self.weight, TensorKind::Param);
        push_mut(out, prefix, "bias", &mut self.bias, TensorKind::Param);
    }
}

/// Batch norm over (batch, time) per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Vec<Mat>,
    inv_std: Vec<f64>,
    pub(crate) batch_mean: Vec<f64>,
    pub(crate) batch_var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            running_mean: self.running_mean.zeros_like(),
            running_var: self.running_var.zeros_like(),
        }
    }

    pub fn forward(&self, xs: &[Mat], mode: Mode) -> (Vec<Mat>, Option<BnCache>) {
        let c = self.channels();
        match mode {
            Mode::Eval => {
                let ys = xs
                    .iter()
                    .map(|x| {
                        let mut y = x.clone();
                        for ch in 0..c {
                            let inv = 1.0 / (self.running_var.data[ch] + BN_EPS).sqrt();
                            let (g, b, m) = (
                                self.gamma.data[ch],
                                self.beta.data[ch],
                                self.running_mean.data[ch],
                            );
                            for v in y.row_mut(ch) {
                                *v = g * (*v - m) * inv + b;
                            }
                        }
                        y
                    })
                    .collect();
                (ys, None)
            }
            Mode::Train => {
                let count: usize = xs.iter().map(|x| x.cols).sum();
                let n = count as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = xs.iter().map(|x| x.row(ch).iter().sum::<f64>()).sum();
                    mean[ch] = s / n;
                    let ss: f64 = xs
                        .iter()
                        .map(|x| x.row(ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                        .sum();
                    var[ch] = ss / n;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = Vec::with_capacity(xs.len());
                let mut ys = Vec::with_capacity(xs.len());
                for x in xs {
                    let mut h = x.clone();
                    let mut y = x.clone();
                    for ch in 0..c {
                        let (g, b) = (self.gamma.data[ch], self.beta.data[ch]);
                        for (hv, yv) in h.row_mut(ch).iter_mut().zip(y.row_mut(ch)) {
                            *hv = (*hv - mean[ch]) * inv_std[ch];
                            *yv = g * *hv + b;
                        }
                    }
                    xhat.push(h);
                    ys.push(y);
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var.clone()
                };
                let cache = BnCache {
                    xhat,
                    inv_std,
                    batch_mean: mean,
                    batch_var_unbiased: unbiased,
                };
                (ys, Some(cache))
            }
        }
    }

    pub fn backward(&self, cache: &BnCache, gys: &[Mat], grad: &mut BatchNorm) -> Vec<Mat> {
        let c = self.channels();
        let n: f64 = gys.iter().map(|g| g.cols).sum::<usize>() as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (gy, xh) in gys.iter().zip(&cache.xhat) {
            for ch in 0..c {
                for (g, h) in gy.row(ch).iter().zip(xh.row(ch)) {
                    sum_g[ch] += g;
                    sum_gx[ch] += g * h;
                }
            }
        }
        for ch in 0..c {
            grad.beta.data[ch] += sum_g[ch];
            grad.gamma.data[ch] += sum_gx[ch];
        }
        gys.iter()
            .zip(&cache.xhat)
            .map(|(gy, xh)| {
                let mut gx = Mat::zeros(gy.rows, gy.cols);
                for ch in 0..c {
                    let scale = self.gamma.data[ch] * cache.inv_std[ch] / n;
                    let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                    for ((dst, g), h) in gx.row_mut(ch).iter_mut().zip(gy.row(ch)).zip(xh.row(ch)) {
                        *dst = scale * (n * g - sg - h * sgx);
                    }
                }
                gx
            })
            .collect()
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * cache.batch_mean[ch];
            let rv = &mut self.running_var.data[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * cache.batch_var_unbiased[ch];
        }
    }

    pub fn add_assign(&mut self, other: &BatchNorm) {
        self.gamma.add_assign(&other.gamma);
        self.beta.add_assign(&other.beta);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        push(out, prefix, "gamma", &self.gamma, TensorKind::Param);
        push(out, prefix, "beta", &self.beta, TensorKind::Param);
        push(out, prefix, "running_mean", &self.running_mean, TensorKind::Buffer);
        push(out, prefix, "running_var", &self.running_var, TensorKind::Buffer);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        push_mut(out, prefix, "gamma", &mut self.gamma, TensorKind::Param);
        push_mut(out, prefix, "beta", &mut self.beta, TensorKind::Param);
        push_mut(out, prefix, "running_mean", &mut self.running_mean, TensorKind::Buffer);
        push_mut(out, prefix, "running_var", &mut self.running_var, TensorKind::Buffer);
    }
}

/// Convolution → ReLU → optional batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnnLayer {
    pub conv: Conv1d,
    pub norm: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct TdnnCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    pub(crate) bn: Option<BnCache>,
}

impl TdnnCache {
    pub fn kink_signature(&self, out: &mut Vec<bool>) {
        for p in &self.pre {
            out.extend(p.data.iter().map(|v| *v > 0.0));
        }
    }
}

impl TdnnLayer {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        TdnnLayer {
            conv: Conv1d::new(in_ch, out_ch, kernel, dilation, rng),
            norm: Some(BatchNorm::new(out_ch)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TdnnLayer {
            conv: self.conv.zeros_like(),
            norm: self.norm.as_ref().map(BatchNorm::zeros_like),
        }
    }

    pub fn forward(&self, xs: &[Mat], mode: Mode) -> Result<(Vec<Mat>, TdnnCache)> {
        let pre = xs
            .par_iter()
            .map(|x| self.conv.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let act: Vec<Mat> = pre
            .iter()
            .map(|p| Mat {
                rows: p.rows,
                cols: p.cols,
                data: p.data.iter().map(|v| v.max(0.0)).collect(),
            })
            .collect();
        let (out, bn) = match &self.norm {
            Some(norm) => norm.forward(&act, mode),
            None => (act, None),
        };
        Ok((
            out,
            TdnnCache {
                inputs: xs.to_vec(),
                pre,
                bn,
            },
        ))
    }

    pub fn backward(&self, cache: &TdnnCache, gys: &[Mat], grad: &mut TdnnLayer) -> Result<Vec<Mat>> {
        let g_act = match (&self.norm, &cache.bn) {
            (Some(norm), Some(bn)) => norm.backward(bn, gys, grad.norm.as_mut().unwrap()),
            (Some(_), None) => {
                return Err(Error::State("batch-norm backward needs a train-mode forward".into()))
            }
            (None, _) => gys.to_vec(),
        };
        let parts: Vec<(Mat, Conv1d)> = g_act
            .par_iter()
            .zip(&cache.pre)
            .zip(&cache.inputs)
            .map(|((ga, pre), x)| {
                let mut gp = ga.clone();
                for (g, p) in gp.data.iter_mut().zip(&pre.data) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                let mut local = self.conv.zeros_like();
                let gx = self.conv.backward(x, &gp, &mut local);
                (gx, local)
            })
            .collect();
        let mut gxs = Vec::with_capacity(parts.len());
        for (gx, local) in parts {
            grad.conv.add_assign(&local);
            gxs.push(gx);
        }
        Ok(gxs)
    }

    pub fn update_running(&mut self, cache: &TdnnCache) {
        if let (Some(norm), Some(bn)) = (self.norm.as_mut(), cache.bn.as_ref()) {
            norm.update_running(bn);
        }
    }

    pub fn add_assign(&mut self, other: &TdnnLayer) {
        self.conv.add_assign(&other.conv);
        if let (Some(a), Some(b)) = (self.norm.as_mut(), other.norm.as_ref()) {
            a.add_assign(b);
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        if let Some(n) = &self.norm {
            n.collect(&format!("{prefix}.bn"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.conv.collect_mut(&format!("{prefix}.conv"), out);
        if let Some(n) = &mut self.norm {
            n.collect_mut(&format!("{prefix}.bn"), out);
        }
    }
}

/// Fully connected layer on vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[out_dim, in_dim], bound, rng),
            bias: Tensor::uniform(&[out_dim], bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.in_dim();
        (0..self.out_dim())
            .map(|o| {
                self.bias.data[o]
                    + self.weight.data[o * n..(o + 1) * n]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let n = self.in_dim();
        let mut gx = vec![0.0; n];
        for (o, &g) in gy.iter().enumerate() {
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n..(o + 1) * n];
            let grow = &mut grad.weight.data[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }

    pub fn add_assign(&mut self, other: &Linear) {
        self.weight.add_assign(&other.weight);
        self.bias.add_assign(&other.bias);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        push(out, prefix, "weight", &self.weight, TensorKind::Param);
        push(out, prefix, "bias", &self.bias, TensorKind::Param);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        push_mut(out, prefix, "weight", &mut self.weight, TensorKind::Param);
        push_mut(out, prefix, "bias", &mut self.bias, TensorKind::Param);
    }
}
