//! Audio ingestion and the log-mel front end.
//!
//! Input audio must already be 16 kHz mono PCM16; nothing is resampled. Each
//! frame is Hann-windowed, zero-padded to `fft_size`, transformed, mapped to
//! power, pooled through a triangular mel filterbank and log-compressed with a
//! floor so that silence stays finite.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

const FEATURE_DUMP_MAGIC: &[u8; 4] = b"LMEL";
const FEATURE_DUMP_VERSION: u32 = 1;

/// Mono audio with amplitudes nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }
}

/// Reads a 16 kHz mono PCM16 RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample format must be PCM 16-bit, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: channel count must be 1, found {}",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample rate must be {SAMPLE_RATE_HZ} Hz, found {}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Waveform::new(samples))
}

/// Writes a waveform as 16 kHz mono PCM16, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(hound_io)?;
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(hound_io)?;
    }
    writer.finalize().map_err(hound_io)
}

fn hound_io(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub mel_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
            mel_bands: 64,
            fmin_hz: 20.0,
            fmax_hz: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_length_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_shift_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    /// Number of frames for `n_samples` input samples, `None` if shorter than one frame.
    pub fn frame_count(&self, n_samples: usize, sample_rate_hz: u32) -> Option<usize> {
        let frame = self.frame_samples(sample_rate_hz);
        let shift = self.shift_samples(sample_rate_hz);
        (n_samples >= frame).then(|| (n_samples - frame) / shift + 1)
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        let frame = self.frame_samples(sample_rate_hz);
        let shift = self.shift_samples(sample_rate_hz);
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {nyquist}",
                self.fmin_hz, self.fmax_hz
            ));
        }
        if shift == 0 || frame == 0 || self.frame_shift_ms > self.frame_length_ms {
            return bad("frame shift must be positive and no longer than the frame".into());
        }
        if self.fft_size < frame {
            return bad(format!("fft_size {} shorter than frame ({frame} samples)", self.fft_size));
        }
        if self.mel_bands == 0 {
            return bad("mel_bands must be positive".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// T × D log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Mat,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn dim(&self) -> usize {
        self.frames.cols
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters as `mel_bands` rows over `fft_size / 2 + 1` bins.
pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate_hz: u32) -> Mat {
    let n_bins = cfg.fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.mel_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bands + 1) as f64))
        .collect();
    let mut bank = Mat::zeros(cfg.mel_bands, n_bins);
    for band in 0..cfg.mel_bands {
        let (left, center, right) = (edges[band], edges[band + 1], edges[band + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * f64::from(sample_rate_hz) / cfg.fft_size as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            bank.set(band, bin, w);
        }
    }
    bank
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable log-mel extractor; holds the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: FeatureConfig,
    sample_rate_hz: u32,
    window: Vec<f64>,
    bank: Mat,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(cfg: &FeatureConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate(sample_rate_hz)?;
        let frame = cfg.frame_samples(sample_rate_hz);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(LogMel {
            cfg: cfg.clone(),
            sample_rate_hz,
            window: hann_window(frame),
            bank: mel_filterbank(cfg, sample_rate_hz),
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate must be {} Hz, found {}",
                self.sample_rate_hz, wave.sample_rate_hz
            )));
        }
        let frame = self.window.len();
        let shift = self.cfg.shift_samples(self.sample_rate_hz);
        let n_frames = self
            .cfg
            .frame_count(wave.len(), self.sample_rate_hz)
            .ok_or(Error::TooShort {
                samples: wave.len(),
                needed: frame,
            })?;
        let n_bins = self.cfg.fft_size / 2 + 1;
        let bands = self.cfg.mel_bands;
        let mut out = Mat::zeros(n_frames, bands);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * shift;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < frame {
                    Complex::new(wave.samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = out.row_mut(t);
            for (band, slot) in row.iter_mut().enumerate() {
                let energy: f64 = self
                    .bank
                    .row(band)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *slot = energy.max(self.cfg.log_floor).ln();
            }
        }
        Ok(FeatureMatrix { frames: out })
    }
}

pub fn log_mel(wave: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    LogMel::new(cfg, wave.sample_rate_hz)?.compute(wave)
}

/// Per-utterance mean normalization of every feature dimension.
pub fn cmvn(feats: &FeatureMatrix) -> FeatureMatrix {
    let m = &feats.frames;
    let mut out = m.clone();
    if m.rows == 0 {
        return FeatureMatrix { frames: out };
    }
    for d in 0..m.cols {
        let mean = (0..m.rows).map(|t| m.get(t, d)).sum::<f64>() / m.rows as f64;
        for t in 0..m.rows {
            out.set(t, d, m.get(t, d) - mean);
        }
    }
    FeatureMatrix { frames: out }
}

/// Serializes features as `LMEL`, version, T, D (u32 LE) followed by f32 LE row-major values.
pub fn write_feature_dump<W: Write>(mut w: W, feats: &FeatureMatrix) -> Result<()> {
    w.write_all(FEATURE_DUMP_MAGIC)?;
    w.write_all(&FEATURE_DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(feats.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(feats.dim() as u32).to_le_bytes())?;
    for v in &feats.frames.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_dump<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != FEATURE_DUMP_MAGIC {
        return Err(Error::parse("feature dump", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != FEATURE_DUMP_VERSION {
        return Err(Error::VersionMismatch {
            found: word(4),
            expected: FEATURE_DUMP_VERSION,
        });
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let mut bytes = vec![0u8; t * d * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(FeatureMatrix {
        frames: Mat::from_vec(t, d, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = log_mel(&sine(440.0, 16000), &FeatureConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 64);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FeatureConfig::default();
        let f = log_mel(&Waveform::new(vec![0.0; 4000]), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(f.frames.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_rejected() {
        let err = log_mel(&Waveform::new(vec![0.1; 399]), &FeatureConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooShort { samples: 399, needed: 400 }));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            FeatureConfig { fmax_hz: 9000.0, ..FeatureConfig::default() },
            FeatureConfig { fft_size: 256, ..FeatureConfig::default() },
            FeatureConfig { frame_shift_ms: 30.0, ..FeatureConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate(16000).is_err());
        }
    }

    #[test]
    fn cmvn_zero_mean_constant_and_idempotent() {
        let data: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
        let f = FeatureMatrix {
            frames: Mat::from_vec(10, 3, data).unwrap(),
        };
        let n = cmvn(&f);
        for d in 0..3 {
            let mean: f64 = (0..10).map(|t| n.frames.get(t, d)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-9);
        }
        let twice = cmvn(&n);
        for (a, b) in n.frames.data.iter().zip(&twice.frames.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = FeatureMatrix {
            frames: Mat::from_vec(4, 2, vec![2.5; 8]).unwrap(),
        };
        assert!(cmvn(&c).frames.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_dump_roundtrip() {
        let f = log_mel(&sine(1000.0, 2000), &FeatureConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_feature_dump(&mut buf, &f).unwrap();
        assert_eq!(&buf[0..4], b"LMEL");
        assert_eq!(buf.len(), 16 + 4 * f.frames.data.len());
        let back = read_feature_dump(&buf[..]).unwrap();
        assert_eq!(back.num_frames(), f.num_frames());
        for (a, b) in back.frames.data.iter().zip(&f.frames.data) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 20.0, 700.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
