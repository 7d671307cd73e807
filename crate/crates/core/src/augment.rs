//! Waveform augmentation: additive noise at a target SNR and reverberation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{load_wav, Waveform};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub apply_probability: f64,
    pub snr_db_range: (f64, f64),
    pub noise_pool: Option<PathBuf>,
    pub rir_pool: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            apply_probability: 0.8,
            snr_db_range: (0.0, 20.0),
            noise_pool: None,
            rir_pool: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidConfig(format!(
                "augmentation probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        if !(self.snr_db_range.0 <= self.snr_db_range.1) {
            return Err(Error::InvalidConfig(format!("SNR range {:?} is not ordered", self.snr_db_range)));
        }
        Ok(())
    }
}

/// In-memory noise and impulse-response pools.
#[derive(Clone, Debug, Default)]
pub struct AugmentPools {
    pub noise: Vec<Waveform>,
    pub rir: Vec<Waveform>,
}

impl AugmentPools {
    pub fn load(cfg: &AugmentConfig) -> Result<Self> {
        Ok(AugmentPools {
            noise: cfg.noise_pool.as_deref().map(load_dir).transpose()?.unwrap_or_default(),
            rir: cfg.rir_pool.as_deref().map(load_dir).transpose()?.unwrap_or_default(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty() && self.rir.is_empty()
    }
}

/// Loads every `.wav` in a directory, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<Waveform>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths.iter().map(load_wav).collect()
}

fn renormalize_peak(samples: &mut [f64], target: f64) {
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 0.0 && peak != target {
        let k = target / peak;
        for s in samples {
            *s *= k;
        }
    }
}

/// Noise segment of exactly `len` samples: a random crop, or the noise looped from a random offset.
fn fit_noise<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if noise.len() >= len {
        let start = rng.random_range(0..=noise.len() - len);
        noise[start..start + len].to_vec()
    } else {
        let start = rng.random_range(0..noise.len());
        (0..len).map(|i| noise[(start + i) % noise.len()]).collect()
    }
}

/// Speech plus noise scaled to the requested SNR, peak-limited to 1.
pub fn mix_noise<R: Rng + ?Sized>(speech: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<Waveform> {
    if speech.is_empty() {
        return Err(Error::EmptySpeech);
    }
    if !(noise.energy() > 0.0) {
        return Err(Error::ZeroEnergyNoise);
    }
    let fitted = fit_noise(&noise.samples, speech.len(), rng);
    let noise_energy: f64 = fitted.iter().map(|v| v * v).sum();
    if !(noise_energy > 0.0) {
        return Err(Error::ZeroEnergyNoise);
    }
    let gain = (speech.energy() / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out: Vec<f64> = speech.samples.iter().zip(&fitted).map(|(s, n)| s + gain * n).collect();
    let peak = out.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        renormalize_peak(&mut out, 1.0);
    }
    Ok(Waveform {
        samples: out,
        sample_rate_hz: speech.sample_rate_hz,
    })
}

/// Linear convolution of `a` and `b`, keeping the first `keep` samples.
fn fft_convolve(a: &[f64], b: &[f64], keep: usize) -> Vec<f64> {
    let full = a.len() + b.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let lift = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(size, Complex::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (lift(a), lift(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.iter().take(keep).map(|c| c.re / size as f64).collect()
}

/// Reverberates speech with an impulse response; length and peak are preserved.
pub fn apply_rir(speech: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::EmptyImpulse);
    }
    if speech.is_empty() {
        return Ok(speech.clone());
    }
    let mut out = if rir.samples.iter().filter(|v| **v != 0.0).count() == 1 {
        // A single tap is an exact scaled shift.
        let (k, w) = rir.samples.iter().enumerate().find(|(_, v)| **v != 0.0).unwrap();
        let mut o = vec![0.0; speech.len()];
        for (i, s) in speech.samples.iter().enumerate().take(speech.len().saturating_sub(k)) {
            o[i + k] = w * s;
        }
        o
    } else {
        fft_convolve(&speech.samples, &rir.samples, speech.len())
    };
    renormalize_peak(&mut out, speech.peak());
    Ok(Waveform {
        samples: out,
        sample_rate_hz: speech.sample_rate_hz,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Noise { index: usize, snr_db: f64 },
    Reverb { index: usize },
}

/// Output of [`maybe_augment_traced`]: the waveform and what, if anything, was applied.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub wave: Waveform,
    pub applied: Option<Perturbation>,
}

/// With probability `apply_probability` applies one perturbation drawn uniformly
/// from the non-empty pools.
pub fn maybe_augment_traced<R: Rng + ?Sized>(
    speech: &Waveform,
    cfg: &AugmentConfig,
    pools: &AugmentPools,
    rng: &mut R,
) -> Result<Augmented> {
    cfg.validate()?;
    if cfg.apply_probability > 0.0 && pools.is_empty() {
        return Err(Error::EmptyPool("both noise and impulse-response pools are empty".into()));
    }
    if cfg.apply_probability == 0.0 || rng.random::<f64>() >= cfg.apply_probability {
        return Ok(Augmented {
            wave: speech.clone(),
            applied: None,
        });
    }
    let use_noise = match (pools.noise.is_empty(), pools.rir.is_empty()) {
        (false, false) => rng.random_bool(0.5),
        (false, true) => true,
        _ => false,
    };
    if use_noise {
        let index = rng.random_range(0..pools.noise.len());
        let (lo, hi) = cfg.snr_db_range;
        let snr_db = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ok(Augmented {
            wave: mix_noise(speech, &pools.noise[index], snr_db, rng)?,
            applied: Some(Perturbation::Noise { index, snr_db }),
        })
    } else {
        let index = rng.random_range(0..pools.rir.len());
        Ok(Augmented {
            wave: apply_rir(speech, &pools.rir[index])?,
            applied: Some(Perturbation::Reverb { index }),
        })
    }
}

pub fn maybe_augment<R: Rng + ?Sized>(
    speech: &Waveform,
    cfg: &AugmentConfig,
    pools: &AugmentPools,
    rng: &mut R,
) -> Result<Waveform> {
    maybe_augment_traced(speech, cfg, pools, rng).map(|a| a.wave)
}

/// White noise with a fixed seed, for test pools and demos.
pub fn synthetic_noise<R: Rng + ?Sized>(len: usize, amplitude: f64, rng: &mut R) -> Waveform {
    Waveform::new((0..len).map(|_| amplitude * rng.random_range(-1.0..1.0)).collect())
}

/// Exponentially decaying noise burst with a unit direct path at t = 0.
pub fn synthetic_rir<R: Rng + ?Sized>(len: usize, rt60_seconds: f64, rng: &mut R) -> Waveform {
    let decay = (-6.9078 / (rt60_seconds * 16000.0)).exp();
    let mut env = 1.0;
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        samples.push(if i == 0 { 1.0 } else { 0.3 * env * rng.random_range(-1.0..1.0) });
        env *= decay;
    }
    Waveform::new(samples)
}
