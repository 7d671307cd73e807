//! Cosine-prototype classification heads.
//!
//! Losses take cosine logits and return the batch-mean loss together with its
//! gradient with respect to every cosine entry; [`CosineHead`] chains that
//! gradient back to embeddings and prototypes.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Mat, Tensor};

/// `C × d` class weight vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub weights: Tensor,
}

impl ClassPrototypes {
    /// Uniform in `[-1/√d, 1/√d]` per entry.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ClassPrototypes {
            weights: Tensor::uniform(&[classes, dim], 1.0 / (dim as f64).sqrt(), &mut rng),
        })
    }

    pub fn from_mat(m: &Mat) -> Self {
        ClassPrototypes {
            weights: Tensor {
                shape: vec![m.rows, m.cols],
                data: m.data.clone(),
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.weights.data[c * d..(c + 1) * d]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub scale_s: f64,
    pub margin_m: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            scale_s: 30.0,
            margin_m: 0.2,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_s > 0.0) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {}", self.scale_s)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin_m) {
            return Err(Error::InvalidConfig(format!("margin must lie in [0, π/2), got {}", self.margin_m)));
        }
        Ok(())
    }
}

/// `N × C` cosine similarities between embeddings and prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineLogits {
    pub values: Mat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Ce,
    Aam,
    Ram,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Ce => "ce",
            HeadKind::Aam => "aam",
            HeadKind::Ram => "ram",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "softmax" => Ok(HeadKind::Ce),
            "aam" | "arcface" => Ok(HeadKind::Aam),
            "ram" => Ok(HeadKind::Ram),
            other => Err(Error::InvalidConfig(format!("unknown head {other:?} (expected ce, aam or ram)"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss value and its gradient with respect to the cosine logits.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad: Mat,
}

pub fn cosine_logits(embeddings: &Mat, protos: &ClassPrototypes) -> Result<CosineLogits> {
    if embeddings.cols != protos.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings have {} dims, prototypes {}",
            embeddings.cols,
            protos.dim()
        )));
    }
    let emb_norms: Vec<f64> = (0..embeddings.rows).map(|i| norm(embeddings.row(i))).collect();
    let proto_norms: Vec<f64> = (0..protos.classes()).map(|j| norm(protos.row(j))).collect();
    if let Some(i) = emb_norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::ZeroNorm(format!("embedding row {i}")));
    }
    if let Some(j) = proto_norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::ZeroNorm(format!("prototype row {j}")));
    }
    let mut cos = Mat::zeros(embeddings.rows, protos.classes());
    for i in 0..embeddings.rows {
        for j in 0..protos.classes() {
            let c = dot(embeddings.row(i), protos.row(j)) / (emb_norms[i] * proto_norms[j]);
            cos.set(i, j, c.clamp(-1.0, 1.0));
        }
    }
    Ok(CosineLogits { values: cos })
}

fn check_labels(cos: &CosineLogits, labels: &[usize]) -> Result<()> {
    let m = &cos.values;
    if labels.len() != m.rows {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), m.rows)));
    }
    if m.rows == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if let Some(y) = labels.iter().find(|y| **y >= m.cols) {
        return Err(Error::ShapeMismatch(format!("label {y} outside {} classes", m.cols)));
    }
    Ok(())
}

/// Softmax cross-entropy on logits `z` for target `y`: returns loss and dL/dz.
///
/// The loss is formed as `(max − z_y) + ln(1 + Σ_{j≠argmax} e^{z_j − max})`,
/// so saturated rows keep their tiny but nonzero value.
fn softmax_xent(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let (arg, max) = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (j, &v)| if v > m { (j, v) } else { (a, m) });
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let rest: f64 = exps.iter().enumerate().filter(|(j, _)| *j != arg).map(|(_, e)| e).sum();
    let total = 1.0 + rest;
    let loss = (max - z[y]) + rest.ln_1p();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

/// Plain scaled-softmax cross-entropy on cosine logits.
pub fn ce_loss(cos: &CosineLogits, labels: &[usize], scale: f64) -> Result<LossOutput> {
    check_labels(cos, labels)?;
    let m = &cos.values;
    let n = m.rows as f64;
    let mut grad = Mat::zeros(m.rows, m.cols);
    let mut per_sample = Vec::with_capacity(m.rows);
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = m.row(i).iter().map(|c| scale * c).collect();
        let (loss, gz) = softmax_xent(&z, y);
        per_sample.push(loss);
        for (g, dz) in grad.row_mut(i).iter_mut().zip(gz) {
            *g = scale * dz / n;
        }
    }
    Ok(LossOutput {
        loss: per_sample.iter().sum::<f64>() / n,
        per_sample,
        grad,
    })
}

/// Margined target logit `cos(θ + m)` and its derivative with respect to `cos θ`.
///
/// Past `θ = π − m` the penalty is linearized to `cos θ − m·sin m`.
pub fn aam_target(cos: f64, margin: f64) -> (f64, f64) {
    let (sin_m, cos_m) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();
    if cos > threshold {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let value = cos * cos_m - sin * sin_m;
        let deriv = cos_m + cos * sin_m / sin.max(1e-12);
        (value, deriv)
    } else {
        (cos - margin * sin_m, 1.0)
    }
}

/// Additive angular margin softmax.
pub fn aam_loss(cos: &CosineLogits, labels: &[usize], cfg: &MarginConfig) -> Result<LossOutput> {
    check_labels(cos, labels)?;
    cfg.validate()?;
    let m = &cos.values;
    let n = m.rows as f64;
    let s = cfg.scale_s;
    let mut grad = Mat::zeros(m.rows, m.cols);
    let mut per_sample = Vec::with_capacity(m.rows);
    for (i, &y) in labels.iter().enumerate() {
        let (phi, dphi) = aam_target(m.get(i, y), cfg.margin_m);
        let z: Vec<f64> = m
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, c)| if j == y { s * phi } else { s * c })
            .collect();
        let (loss, gz) = softmax_xent(&z, y);
        per_sample.push(loss);
        for (j, (g, dz)) in grad.row_mut(i).iter_mut().zip(gz).enumerate() {
            *g = s * dz / n;
            if j == y {
                *g *= dphi;
            }
        }
    }
    Ok(LossOutput {
        loss: per_sample.iter().sum::<f64>() / n,
        per_sample,
        grad,
    })
}

/// Real additive margin softmax: hinge-clamped pairwise margins.
pub fn ram_loss(cos: &CosineLogits, labels: &[usize], cfg: &MarginConfig) -> Result<LossOutput> {
    check_labels(cos, labels)?;
    cfg.validate()?;
    let m = &cos.values;
    let n = m.rows as f64;
    let s = cfg.scale_s;
    let mut grad = Mat::zeros(m.rows, m.cols);
    let mut per_sample = Vec::with_capacity(m.rows);
    for (i, &y) in labels.iter().enumerate() {
        let row = m.row(i);
        let target = row[y];
        // raw > 0 marks an active (violated) hinge; the boundary itself is inactive.
        let raw: Vec<f64> = row.iter().map(|c| s * (c + cfg.margin_m - target)).collect();
        let args: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, r)| if j == y { f64::NEG_INFINITY } else { r.max(0.0) })
            .collect();
        let top = args.iter().cloned().fold(0.0_f64, f64::max);
        let scaled: Vec<f64> = args.iter().map(|a| (a - top).exp()).collect();
        let denom = (-top).exp() + scaled.iter().sum::<f64>();
        let loss = top + denom.ln();
        per_sample.push(loss);
        let g = grad.row_mut(i);
        for j in 0..row.len() {
            if j != y && raw[j] > 0.0 {
                let q = scaled[j] / denom;
                g[j] += s * q / n;
                g[y] -= s * q / n;
            }
        }
    }
    Ok(LossOutput {
        loss: per_sample.iter().sum::<f64>() / n,
        per_sample,
        grad,
    })
}

pub fn head_loss(kind: HeadKind, cos: &CosineLogits, labels: &[usize], cfg: &MarginConfig) -> Result<LossOutput> {
    match kind {
        HeadKind::Ce => ce_loss(cos, labels, cfg.scale_s),
        HeadKind::Aam => aam_loss(cos, labels, cfg),
        HeadKind::Ram => ram_loss(cos, labels, cfg),
    }
}

/// Gradients of the normalized dot products with respect to both operands.
pub fn cosine_backward(
    grad_cos: &Mat,
    embeddings: &Mat,
    protos: &ClassPrototypes,
    cos: &CosineLogits,
) -> Result<(Mat, Mat)> {
    let (n, c, d) = (embeddings.rows, protos.classes(), protos.dim());
    if grad_cos.rows != n || grad_cos.cols != c || cos.values.rows != n || cos.values.cols != c {
        return Err(Error::ShapeMismatch(format!(
            "cosine gradient is {}x{}, expected {n}x{c}",
            grad_cos.rows, grad_cos.cols
        )));
    }
    let emb_norms: Vec<f64> = (0..n).map(|i| norm(embeddings.row(i))).collect();
    let proto_norms: Vec<f64> = (0..c).map(|j| norm(protos.row(j))).collect();
    let mut g_emb = Mat::zeros(n, d);
    let mut g_proto = Mat::zeros(c, d);
    for i in 0..n {
        let e = embeddings.row(i);
        for j in 0..c {
            let g = grad_cos.get(i, j);
            if g == 0.0 {
                continue;
            }
            let w = protos.row(j);
            let cij = cos.values.get(i, j);
            let (ne, nw) = (emb_norms[i], proto_norms[j]);
            for k in 0..d {
                let (eh, wh) = (e[k] / ne, w[k] / nw);
                g_emb.data[i * d + k] += g * (wh - cij * eh) / ne;
                g_proto.data[j * d + k] += g * (eh - cij * wh) / nw;
            }
        }
    }
    Ok((g_emb, g_proto))
}

/// Prototypes plus the cached cosine pass that a backward call consumes.
#[derive(Clone, Debug)]
pub struct CosineHead {
    pub protos: ClassPrototypes,
    cache: Option<(Mat, CosineLogits)>,
}

impl CosineHead {
    pub fn new(protos: ClassPrototypes) -> Self {
        CosineHead { protos, cache: None }
    }

    pub fn forward(&mut self, embeddings: &Mat) -> Result<CosineLogits> {
        let cos = cosine_logits(embeddings, &self.protos)?;
        self.cache = Some((embeddings.clone(), cos.clone()));
        Ok(cos)
    }

    /// Returns `(grad_embeddings, grad_prototypes)`.
    pub fn backward(&mut self, grad_cos: &Mat) -> Result<(Mat, Mat)> {
        let (emb, cos) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("head backward without a cached cosine pass".into()))?;
        cosine_backward(grad_cos, &emb, &self.protos, &cos)
    }
}
