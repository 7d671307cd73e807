use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, SAMPLE_RATE_HZ};
use crate::heads::{HeadKind, MarginConfig};
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub head: HeadKind,
    pub margin: MarginConfig,
    /// `total_steps` is ignored; training derives it from epochs and batches.
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub crop_seconds: f64,
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    /// Parameters whose names start with any of these prefixes are not updated.
    pub freeze: Vec<String>,
    /// Fraction of unreadable training utterances tolerated before giving up.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            head: HeadKind::Aam,
            margin: MarginConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            crop_seconds: 4.0,
            encoder: EncoderConfig::default(),
            features: FeatureConfig::default(),
            freeze: Vec::new(),
            max_skip_fraction: 0.1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("config key {key}"), format!("cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::InvalidConfig(format!("crop_seconds {}", self.crop_seconds)));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::InvalidConfig(format!("max_skip_fraction {}", self.max_skip_fraction)));
        }
        if self.encoder.input_dim != self.features.mel_bands {
            return Err(Error::InvalidConfig(format!(
                "encoder input_dim {} differs from mel_bands {}",
                self.encoder.input_dim, self.features.mel_bands
            )));
        }
        self.margin.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.features.validate(SAMPLE_RATE_HZ)?;
        OptimConfig {
            total_steps: 1,
            ..self.optim.clone()
        }
        .validate()
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * f64::from(SAMPLE_RATE_HZ)).round() as usize
    }

    /// Sets one option by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "head" => self.head = parse_value(key, value)?,
            "margin" => self.margin.margin_m = parse_value(key, value)?,
            "scale" => self.margin.scale_s = parse_value(key, value)?,
            "lr" => self.optim.lr0 = parse_value(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse_value(key, value)?,
            "beta1" => self.optim.beta1 = parse_value(key, value)?,
            "beta2" => self.optim.beta2 = parse_value(key, value)?,
            "adam_eps" => self.optim.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "crop_seconds" => self.crop_seconds = parse_value(key, value)?,
            "freeze" => self.freeze = parse_list(key, value)?,
            "max_skip_fraction" => self.max_skip_fraction = parse_value(key, value)?,
            "augment.probability" => self.augment.apply_probability = parse_value(key, value)?,
            "augment.snr_min_db" => self.augment.snr_db_range.0 = parse_value(key, value)?,
            "augment.snr_max_db" => self.augment.snr_db_range.1 = parse_value(key, value)?,
            "augment.noise_dir" => self.augment.noise_pool = optional_path(value),
            "augment.rir_dir" => self.augment.rir_pool = optional_path(value),
            _ => return set_model_key(&mut self.encoder, &mut self.features, key, value),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_kv_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{origin}:{}", i + 1), "expected key = value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }
}

/// Encoder and feature keys, shared by the training config and checkpoint headers.
pub(crate) fn set_model_key(enc: &mut EncoderConfig, feat: &mut FeatureConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "encoder.input_dim" => enc.input_dim = parse_value(key, value)?,
        "encoder.channels" => enc.layer_channels = parse_list(key, value)?,
        "encoder.kernels" => enc.kernel_sizes = parse_list(key, value)?,
        "encoder.dilations" => enc.dilations = parse_list(key, value)?,
        "encoder.res2_scale" => enc.res2_scale = parse_value(key, value)?,
        "encoder.se_bottleneck" => enc.se_bottleneck = parse_value(key, value)?,
        "encoder.attention_hidden" => enc.attention_hidden = parse_value(key, value)?,
        "encoder.embedding_dim" => enc.embedding_dim = parse_value(key, value)?,
        "features.frame_length_ms" => feat.frame_length_ms = parse_value(key, value)?,
        "features.frame_shift_ms" => feat.frame_shift_ms = parse_value(key, value)?,
        "features.fft_size" => feat.fft_size = parse_value(key, value)?,
        "features.mel_bands" => feat.mel_bands = parse_value(key, value)?,
        "features.fmin_hz" => feat.fmin_hz = parse_value(key, value)?,
        "features.fmax_hz" => feat.fmax_hz = parse_value(key, value)?,
        "features.log_floor" => feat.log_floor = parse_value(key, value)?,
        _ => return Err(Error::parse("config", format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `key=value` lines for the model shape; floats use round-trip formatting.
pub(crate) fn model_kv(enc: &EncoderConfig, feat: &FeatureConfig) -> Vec<(String, String)> {
    vec![
        ("encoder.input_dim".into(), enc.input_dim.to_string()),
        ("encoder.channels".into(), join(&enc.layer_channels)),
        ("encoder.kernels".into(), join(&enc.kernel_sizes)),
        ("encoder.dilations".into(), join(&enc.dilations)),
        ("encoder.res2_scale".into(), enc.res2_scale.to_string()),
        ("encoder.se_bottleneck".into(), enc.se_bottleneck.to_string()),
        ("encoder.attention_hidden".into(), enc.attention_hidden.to_string()),
        ("encoder.embedding_dim".into(), enc.embedding_dim.to_string()),
        ("features.frame_length_ms".into(), feat.frame_length_ms.to_string()),
        ("features.frame_shift_ms".into(), feat.frame_shift_ms.to_string()),
        ("features.fft_size".into(), feat.fft_size.to_string()),
        ("features.mel_bands".into(), feat.mel_bands.to_string()),
        ("features.fmin_hz".into(), feat.fmin_hz.to_string()),
        ("features.fmax_hz".into(), feat.fmax_hz.to_string()),
        ("features.log_floor".into(), feat.log_floor.to_string()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (30, 64));
        assert_eq!(c.optim.lr0, 1e-4);
        assert_eq!((c.margin.margin_m, c.margin.scale_s), (0.2, 30.0));
        assert_eq!(c.augment.apply_probability, 0.8);
        c.validate().unwrap();
    }

    #[test]
    fn kv_text_overrides() {
        let mut c = TrainConfig::default();
        c.apply_kv_text(
            "# tiny run\nepochs = 3\nhead=ram\nencoder.channels = 8, 8\nencoder.kernels=3,3\nencoder.dilations=1,2\nfreeze=encoder.first\naugment.noise_dir=none\n",
            "inline",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.head, HeadKind::Ram);
        assert_eq!(c.encoder.layer_channels, vec![8, 8]);
        assert_eq!(c.freeze, vec!["encoder.first".to_string()]);
        assert!(c.augment.noise_pool.is_none());
        assert!(c.apply_kv_text("bogus = 1", "inline").is_err());
        assert!(c.apply_kv_text("epochs", "inline").is_err());
        assert!(c.apply_kv_text("epochs = many", "inline").is_err());
    }

    #[test]
    fn model_kv_roundtrips() {
        let enc = EncoderConfig {
            layer_channels: vec![16, 8],
            kernel_sizes: vec![5, 3],
            dilations: vec![1, 2],
            ..EncoderConfig::default()
        };
        let feat = FeatureConfig {
            fmax_hz: 7123.456789,
            ..FeatureConfig::default()
        };
        let (mut e2, mut f2) = (EncoderConfig::default(), FeatureConfig::default());
        for (k, v) in model_kv(&enc, &feat) {
            set_model_key(&mut e2, &mut f2, &k, &v).unwrap();
        }
        assert_eq!((e2, f2), (enc, feat));
    }
}
