//! Res2-style multi-scale convolution.
//!
//! Channels are split into `scale` groups. Group 0 passes through, group 1 is
//! convolved directly and every later group is convolved after adding the
//! previous group's output. With `scale == 1` the block is a single TDNN layer.

use rand::Rng;

use super::layers::{Mode, TdnnCache, TdnnLayer};
use crate::error::{Error, Result};
use crate::tensor::{Mat, NamedTensor, NamedTensorMut};

#[derive(Clone, Debug, PartialEq)]
pub struct Res2 {
    pub scale: usize,
    pub convs: Vec<TdnnLayer>,
}

#[derive(Clone, Debug)]
pub struct Res2Cache {
    pub(crate) convs: Vec<TdnnCache>,
}

impl Res2Cache {
    pub fn kink_signature(&self, out: &mut Vec<bool>) {
        for c in &self.convs {
            c.kink_signature(out);
        }
    }
}

impl Res2 {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if scale == 0 || !channels.is_multiple_of(scale) {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels not divisible by res2 scale {scale}"
            )));
        }
        let width = channels / scale;
        let n = if scale == 1 { 1 } else { scale - 1 };
        let convs = (0..n)
            .map(|_| TdnnLayer::new(width, width, kernel, dilation, rng))
            .collect();
        Ok(Res2 { scale, convs })
    }

    pub fn width(&self) -> usize {
        self.convs[0].conv.in_channels()
    }

    pub fn channels(&self) -> usize {
        self.width() * self.scale
    }

    pub fn zeros_like(&self) -> Self {
        Res2 {
            scale: self.scale,
            convs: self.convs.iter().map(TdnnLayer::zeros_like).collect(),
        }
    }

    pub fn forward(&self, xs: &[Mat], mode: Mode) -> Result<(Vec<Mat>, Res2Cache)> {
        if let Some(x) = xs.iter().find(|x| x.rows != self.channels()) {
            return Err(Error::ShapeMismatch(format!(
                "res2 expects {} channels, got {}",
                self.channels(),
                x.rows
            )));
        }
        if self.scale == 1 {
            let (ys, cache) = self.convs[0].forward(xs, mode)?;
            return Ok((ys, Res2Cache { convs: vec![cache] }));
        }
        let w = self.width();
        let group = |k: usize| -> Vec<Mat> {
            xs.iter().map(|x| x.slice_rows(k * w, (k + 1) * w)).collect()
        };
        let mut outputs: Vec<Vec<Mat>> = vec![group(0)];
        let mut caches = Vec::with_capacity(self.convs.len());
        for k in 1..self.scale {
            let mut input = group(k);
            if k >= 2 {
                for (a, b) in input.iter_mut().zip(&outputs[k - 1]) {
                    a.add_assign(b);
                }
            }
            let (y, cache) = self.convs[k - 1].forward(&input, mode)?;
            outputs.push(y);
            caches.push(cache);
        }
        let ys = (0..xs.len())
            .map(|b| {
                let parts: Vec<&Mat> = outputs.iter().map(|o| &o[b]).collect();
                Mat::vstack(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((ys, Res2Cache { convs: caches }))
    }

    pub fn backward(&self, cache: &Res2Cache, gys: &[Mat], grad: &mut Res2) -> Result<Vec<Mat>> {
        if self.scale == 1 {
            return self.convs[0].backward(&cache.convs[0], gys, &mut grad.convs[0]);
        }
        let w = self.width();
        let mut gx: Vec<Vec<Mat>> = vec![Vec::new(); self.scale];
        let mut carry: Option<Vec<Mat>> = None;
        for k in (1..self.scale).rev() {
            let mut g: Vec<Mat> = gys.iter().map(|m| m.slice_rows(k * w, (k + 1) * w)).collect();
            if let Some(c) = carry.take() {
                for (a, b) in g.iter_mut().zip(&c) {
                    a.add_assign(b);
                }
            }
            let gin = self.convs[k - 1].backward(&cache.convs[k - 1], &g, &mut grad.convs[k - 1])?;
            if k >= 2 {
                carry = Some(gin.clone());
            }
            gx[k] = gin;
        }
        gx[0] = gys.iter().map(|m| m.slice_rows(0, w)).collect();
        (0..gys.len())
            .map(|b| {
                let parts: Vec<&Mat> = gx.iter().map(|g| &g[b]).collect();
                Mat::vstack(&parts)
            })
            .collect()
    }

    pub fn update_running(&mut self, cache: &Res2Cache) {
        for (conv, c) in self.convs.iter_mut().zip(&cache.convs) {
            conv.update_running(c);
        }
    }

    pub fn add_assign(&mut self, other: &Res2) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        for (k, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.{k}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        for (k, conv) in self.convs.iter_mut().enumerate() {
            conv.collect_mut(&format!("{prefix}.{k}"), out);
        }
    }
}
