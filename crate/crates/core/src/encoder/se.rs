//! Squeeze-and-excitation channel gating.

use rand::Rng;

use super::layers::{push, push_mut, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Mat, NamedTensor, NamedTensorMut, TensorKind};

#[derive(Clone, Debug, PartialEq)]
pub struct SeGate {
    pub squeeze: Linear,
    pub excite: Linear,
}

#[derive(Clone, Debug)]
pub struct SeCache {
    input: Mat,
    mean: Vec<f64>,
    hidden_pre: Vec<f64>,
    gate: Vec<f64>,
}

impl SeCache {
    pub fn kink_signature(&self, out: &mut Vec<bool>) {
        out.extend(self.hidden_pre.iter().map(|v| *v > 0.0));
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SeGate {
    pub fn new<R: Rng + ?Sized>(channels: usize, bottleneck: usize, rng: &mut R) -> Self {
        SeGate {
            squeeze: Linear::new(channels, bottleneck, rng),
            excite: Linear::new(bottleneck, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        SeGate {
            squeeze: self.squeeze.zeros_like(),
            excite: self.excite.zeros_like(),
        }
    }

    /// Per-channel gates in (0, 1) for one utterance.
    pub fn gates(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.1.gate)
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, SeCache)> {
        if x.rows != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "SE gate expects {} channels, got {}",
                self.channels(),
                x.rows
            )));
        }
        let t = x.cols.max(1) as f64;
        let mean: Vec<f64> = (0..x.rows).map(|c| x.row(c).iter().sum::<f64>() / t).collect();
        let hidden_pre = self.squeeze.forward(&mean);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = self.excite.forward(&hidden).into_iter().map(sigmoid).collect();
        let mut y = x.clone();
        for (c, g) in gate.iter().enumerate() {
            for v in y.row_mut(c) {
                *v *= g;
            }
        }
        Ok((
            y,
            SeCache {
                input: x.clone(),
                mean,
                hidden_pre,
                gate,
            },
        ))
    }

    pub fn backward(&self, cache: &SeCache, gy: &Mat, grad: &mut SeGate) -> Mat {
        let x = &cache.input;
        let t = x.cols.max(1) as f64;
        let mut gx = gy.clone();
        let mut g_pre = vec![0.0; x.rows];
        for c in 0..x.rows {
            let g = cache.gate[c];
            let dg: f64 = gy.row(c).iter().zip(x.row(c)).map(|(a, b)| a * b).sum();
            g_pre[c] = dg * g * (1.0 - g);
            for v in gx.row_mut(c) {
                *v *= g;
            }
        }
        let hidden: Vec<f64> = cache.hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let mut g_hidden = self.excite.backward(&hidden, &g_pre, &mut grad.excite);
        for (g, p) in g_hidden.iter_mut().zip(&cache.hidden_pre) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let g_mean = self.squeeze.backward(&cache.mean, &g_hidden, &mut grad.squeeze);
        for (c, gm) in g_mean.iter().enumerate() {
            for v in gx.row_mut(c) {
                *v += gm / t;
            }
        }
        gx
    }

    pub fn add_assign(&mut self, other: &SeGate) {
        self.squeeze.add_assign(&other.squeeze);
        self.excite.add_assign(&other.excite);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        push(out, prefix, "squeeze.weight", &self.squeeze.weight, TensorKind::Param);
        push(out, prefix, "squeeze.bias", &self.squeeze.bias, TensorKind::Param);
        push(out, prefix, "excite.weight", &self.excite.weight, TensorKind::Param);
        push(out, prefix, "excite.bias", &self.excite.bias, TensorKind::Param);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        push_mut(out, prefix, "squeeze.weight", &mut self.squeeze.weight, TensorKind::Param);
        push_mut(out, prefix, "squeeze.bias", &mut self.squeeze.bias, TensorKind::Param);
        push_mut(out, prefix, "excite.weight", &mut self.excite.weight, TensorKind::Param);
        push_mut(out, prefix, "excite.bias", &mut self.excite.bias, TensorKind::Param);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_excitation_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut se = SeGate::new(3, 2, &mut rng);
        se.excite = se.excite.zeros_like();
        let x = random_mat(3, 5, &mut rng);
        let (y, _) = se.forward(&x).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn saturated_bias_passes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut se = SeGate::new(3, 2, &mut rng);
        se.excite = se.excite.zeros_like();
        se.excite.bias.data.fill(40.0);
        let x = random_mat(3, 5, &mut rng);
        let (y, _) = se.forward(&x).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let se = SeGate::new(4, 2, &mut rng);
        let x = random_mat(4, 6, &mut rng);
        let (y, _) = se.forward(&x).unwrap();
        for c in 0..4 {
            let mut u = se.excite.bias.data[c];
            for h in 0..2 {
                let mut z = se.squeeze.bias.data[h];
                for k in 0..4 {
                    let mean: f64 = (0..6).map(|t| x.get(k, t)).sum::<f64>() / 6.0;
                    z += se.squeeze.weight.data[h * 4 + k] * mean;
                }
                u += se.excite.weight.data[c * 2 + h] * z.max(0.0);
            }
            let gate = 1.0 / (1.0 + (-u).exp());
            for t in 0..6 {
                assert!((y.get(c, t) - gate * x.get(c, t)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn output_never_exceeds_input(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let se = SeGate::new(5, 3, &mut rng);
            let x = random_mat(5, 8, &mut rng);
            let (y, _) = se.forward(&x).unwrap();
            for (a, b) in y.data.iter().zip(&x.data) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
