//! Attentive statistics pooling.
//!
//! A per-frame scalar score `v · tanh(W h_t + b)` is softmaxed over time and
//! used to weight the mean and standard deviation of every channel.

use rand::Rng;

use super::layers::{push, push_mut};
use crate::error::{Error, Result};
use crate::tensor::{Mat, NamedTensor, NamedTensorMut, Tensor, TensorKind};

/// Variance floor inside the square root.
pub const ASP_VAR_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentivePool {
    /// `[hidden, channels]`
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    /// `[hidden]`
    pub score_weight: Tensor,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input: Mat,
    /// `[hidden, T]`
    act: Mat,
    pub(crate) alpha: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    std: Vec<f64>,
}

impl PoolCache {
    pub fn kink_signature(&self, out: &mut Vec<bool>) {
        out.extend(self.var.iter().map(|v| *v > ASP_VAR_EPS));
    }
}

impl AttentivePool {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        AttentivePool {
            hidden_weight: Tensor::uniform(&[hidden, channels], b1, rng),
            hidden_bias: Tensor::uniform(&[hidden], b1, rng),
            score_weight: Tensor::uniform(&[hidden], b2, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.hidden_weight.shape[1]
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weight.shape[0]
    }

    pub fn zeros_like(&self) -> Self {
        AttentivePool {
            hidden_weight: self.hidden_weight.zeros_like(),
            hidden_bias: self.hidden_bias.zeros_like(),
            score_weight: self.score_weight.zeros_like(),
        }
    }

    /// Returns `concat(mean, std)` of length `2C`.
    pub fn forward(&self, h: &Mat) -> Result<(Vec<f64>, PoolCache)> {
        let (c, t, hid) = (h.rows, h.cols, self.hidden());
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "pooling expects {} channels, got {c}",
                self.channels()
            )));
        }
        if t == 0 {
            return Err(Error::ShapeMismatch("pooling over zero frames".into()));
        }
        let mut act = Mat::zeros(hid, t);
        for j in 0..hid {
            let row = act.row_mut(j);
            row.fill(self.hidden_bias.data[j]);
            for ch in 0..c {
                let w = self.hidden_weight.data[j * c + ch];
                for (a, x) in row.iter_mut().zip(h.row(ch)) {
                    *a += w * x;
                }
            }
            for a in row.iter_mut() {
                *a = a.tanh();
            }
        }
        let mut scores = vec![0.0; t];
        for j in 0..hid {
            let v = self.score_weight.data[j];
            for (s, a) in scores.iter_mut().zip(act.row(j)) {
                *s += v * a;
            }
        }
        let alpha = softmax(&scores);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let (mut m, mut sq) = (0.0, 0.0);
            for (a, x) in alpha.iter().zip(h.row(ch)) {
                m += a * x;
                sq += a * x * x;
            }
            mean[ch] = m;
            var[ch] = sq - m * m;
        }
        let std: Vec<f64> = var.iter().map(|v| v.max(ASP_VAR_EPS).sqrt()).collect();
        let mut out = mean.clone();
        out.extend_from_slice(&std);
        Ok((
            out,
            PoolCache {
                input: h.clone(),
                act,
                alpha,
                mean,
                var,
                std,
            },
        ))
    }

    pub fn backward(&self, cache: &PoolCache, gy: &[f64], grad: &mut AttentivePool) -> Mat {
        let h = &cache.input;
        let (c, t, hid) = (h.rows, h.cols, self.hidden());
        let (g_mean, g_std) = gy.split_at(c);
        let g_var: Vec<f64> = (0..c)
            .map(|ch| {
                if cache.var[ch] > ASP_VAR_EPS {
                    g_std[ch] / (2.0 * cache.std[ch])
                } else {
                    0.0
                }
            })
            .collect();
        let mut gh = Mat::zeros(c, t);
        let mut g_alpha = vec![0.0; t];
        for ch in 0..c {
            let (gm, gv, mu) = (g_mean[ch], g_var[ch], cache.mean[ch]);
            for (tt, (&x, &a)) in h.row(ch).iter().zip(&cache.alpha).enumerate() {
                gh.data[ch * t + tt] = a * (gm + gv * 2.0 * (x - mu));
                g_alpha[tt] += gm * x + gv * (x * x - 2.0 * mu * x);
            }
        }
        let weighted: f64 = g_alpha.iter().zip(&cache.alpha).map(|(g, a)| g * a).sum();
        let g_score: Vec<f64> = g_alpha
            .iter()
            .zip(&cache.alpha)
            .map(|(g, a)| a * (g - weighted))
            .collect();
        for j in 0..hid {
            let v = self.score_weight.data[j];
            let arow = cache.act.row(j);
            let mut gv = 0.0;
            let mut g_pre = vec![0.0; t];
            for tt in 0..t {
                gv += g_score[tt] * arow[tt];
                g_pre[tt] = g_score[tt] * v * (1.0 - arow[tt] * arow[tt]);
            }
            grad.score_weight.data[j] += gv;
            grad.hidden_bias.data[j] += g_pre.iter().sum::<f64>();
            for ch in 0..c {
                let w = self.hidden_weight.data[j * c + ch];
                let hrow = h.row(ch);
                let mut gw = 0.0;
                for tt in 0..t {
                    gw += g_pre[tt] * hrow[tt];
                    gh.data[ch * t + tt] += w * g_pre[tt];
                }
                grad.hidden_weight.data[j * c + ch] += gw;
            }
        }
        gh
    }

    pub fn add_assign(&mut self, other: &AttentivePool) {
        self.hidden_weight.add_assign(&other.hidden_weight);
        self.hidden_bias.add_assign(&other.hidden_bias);
        self.score_weight.add_assign(&other.score_weight);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        push(out, prefix, "hidden.weight", &self.hidden_weight, TensorKind::Param);
        push(out, prefix, "hidden.bias", &self.hidden_bias, TensorKind::Param);
        push(out, prefix, "score.weight", &self.score_weight, TensorKind::Param);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        push_mut(out, prefix, "hidden.weight", &mut self.hidden_weight, TensorKind::Param);
        push_mut(out, prefix, "hidden.bias", &mut self.hidden_bias, TensorKind::Param);
        push_mut(out, prefix, "score.weight", &mut self.score_weight, TensorKind::Param);
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
