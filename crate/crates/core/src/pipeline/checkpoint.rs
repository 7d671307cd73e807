//! Binary checkpoint format.
//!
//! ```text
//! "LIDC"  version:u32
//! header_len:u32  header: UTF-8 `key=value` lines (model shape, classes, metadata)
//! count:u32
//! count × { name_len:u32 name rank:u32 dims:u32×rank values:f32×prod(dims) }
//! ```
//!
//! All integers and floats are little-endian. Tensors are stored at 32-bit
//! precision; [`Checkpoint::new`] rounds parameters the same way so a
//! checkpoint value survives save/load unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{model_kv, set_model_key};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::heads::{ClassPrototypes, HeadKind};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LIDC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PROTOTYPE_TENSOR: &str = "head.prototypes";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub head: HeadKind,
    /// Crop length used in training; evaluation center-crops to the same length.
    pub crop_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder_config: EncoderConfig,
    pub features: FeatureConfig,
    pub params: EncoderParams,
    pub prototypes: ClassPrototypes,
    pub classes: Vec<String>,
    pub meta: TrainingMeta,
}

fn round_f32(t: &mut Tensor) {
    for v in &mut t.data {
        *v = f64::from(*v as f32);
    }
}

impl Checkpoint {
    /// Assembles a checkpoint, rounding every tensor to its stored precision.
    pub fn new(
        encoder_config: EncoderConfig,
        features: FeatureConfig,
        mut params: EncoderParams,
        mut prototypes: ClassPrototypes,
        classes: Vec<String>,
        meta: TrainingMeta,
    ) -> Result<Self> {
        if classes.len() != prototypes.classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} class names for {} prototypes",
                classes.len(),
                prototypes.classes()
            )));
        }
        if prototypes.dim() != encoder_config.embedding_dim {
            return Err(Error::ShapeMismatch(format!(
                "prototype dim {} vs embedding dim {}",
                prototypes.dim(),
                encoder_config.embedding_dim
            )));
        }
        for nt in params.named_tensors_mut() {
            round_f32(nt.tensor);
        }
        round_f32(&mut prototypes.weights);
        Ok(Checkpoint {
            encoder_config,
            features,
            params,
            prototypes,
            classes,
            meta,
        })
    }

    fn header(&self) -> String {
        let mut kv = model_kv(&self.encoder_config, &self.features);
        kv.push(("classes".into(), self.classes.join(",")));
        kv.push(("meta.epoch".into(), self.meta.epoch.to_string()));
        kv.push(("meta.seed".into(), self.meta.seed.to_string()));
        kv.push(("meta.head".into(), self.meta.head.to_string()));
        kv.push(("meta.crop_seconds".into(), self.meta.crop_seconds.to_string()));
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.header();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let tensors = self.params.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
        let mut write_tensor = |name: &str, t: &Tensor| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        for nt in &tensors {
            write_tensor(&nt.name, nt.tensor);
        }
        write_tensor(PROTOTYPE_TENSOR, &self.prototypes.weights);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
        let (encoder_config, features, classes, meta) = parse_header(header)?;
        encoder_config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("encoder config: {e}")))?;

        let count = r.u32()? as usize;
        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if stored.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut params = EncoderParams::init(&encoder_config, 0)?;
        for nt in params.named_tensors_mut() {
            let t = stored
                .remove(&nt.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {}", nt.name)))?;
            if t.shape != nt.tensor.shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    nt.name, t.shape, nt.tensor.shape
                )));
            }
            *nt.tensor = t;
        }
        let weights = stored
            .remove(PROTOTYPE_TENSOR)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {PROTOTYPE_TENSOR}")))?;
        if weights.shape != [classes.len(), encoder_config.embedding_dim] {
            return Err(Error::CorruptCheckpoint(format!(
                "prototypes have shape {:?} for {} classes",
                weights.shape,
                classes.len()
            )));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            encoder_config,
            features,
            params,
            prototypes: ClassPrototypes { weights },
            classes,
            meta,
        })
    }
}

type Header = (EncoderConfig, FeatureConfig, Vec<String>, TrainingMeta);

fn parse_header(text: &str) -> Result<Header> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let mut enc = EncoderConfig::default();
    let mut feat = FeatureConfig::default();
    let mut classes = None;
    let mut meta = TrainingMeta {
        epoch: 0,
        seed: 0,
        head: HeadKind::Aam,
        crop_seconds: 4.0,
    };
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("header line {line:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| corrupt(format!("{k}={v}")));
        match k {
            "classes" => classes = Some(v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect::<Vec<_>>()),
            "meta.epoch" => meta.epoch = v.parse().map_err(|_| corrupt(format!("{k}={v}")))?,
            "meta.seed" => meta.seed = v.parse().map_err(|_| corrupt(format!("{k}={v}")))?,
            "meta.head" => meta.head = v.parse().map_err(|_| corrupt(format!("{k}={v}")))?,
            "meta.crop_seconds" => meta.crop_seconds = num(v)?,
            _ => set_model_key(&mut enc, &mut feat, k, v).map_err(|e| corrupt(e.to_string()))?,
        }
    }
    let classes = classes.ok_or_else(|| corrupt("header lists no classes".into()))?;
    Ok((enc, feat, classes, meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
