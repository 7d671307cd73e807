use std::collections::BTreeMap;
use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::config::TrainConfig;
use super::tasks::{center_crop, embed_features};
use crate::augment::{maybe_augment, AugmentPools};
use crate::encoder::{EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::features::{cmvn, load_wav, FeatureMatrix, LogMel, Waveform, SAMPLE_RATE_HZ};
use crate::heads::{cosine_backward, cosine_logits, head_loss, ClassPrototypes};
use crate::optim::{adamw_step, cosine_lr, OptimState, ParamSlot};
use crate::scoring::classify;
use crate::synthkit::Manifest;
use crate::tensor::{Tensor, TensorKind};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const CROP_SALT: u64 = 0x4352_4f50;
const PROTOTYPE_SALT: u64 = 0x5052_4f54;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Smallest per-utterance loss seen during the epoch.
    pub min_sample_loss: f64,
    pub val_micro_accuracy: Option<f64>,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub steps: usize,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  steps {:>4}  lr {:.3e}  train_loss {:.6}  min_sample_loss {:.6}",
            self.epoch, self.steps, self.lr, self.train_loss, self.min_sample_loss
        )?;
        match self.val_micro_accuracy {
            Some(a) => write!(f, "  val_micro_acc {a:.4}"),
            None => write!(f, "  val_micro_acc -"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the highest validation micro accuracy (the last one without validation data).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub skipped: Vec<String>,
}

/// Zero-pads or randomly crops to exactly `n` samples.
pub fn random_crop<R: Rng + ?Sized>(wave: &Waveform, n: usize, rng: &mut R) -> Waveform {
    if wave.len() <= n {
        return center_crop(wave, n);
    }
    let start = rng.random_range(0..=wave.len() - n);
    Waveform {
        samples: wave.samples[start..start + n].to_vec(),
        sample_rate_hz: wave.sample_rate_hz,
    }
}

fn utterance_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CROP_SALT);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Trains with augmentation pools loaded from the paths in `cfg.augment`.
pub fn train(train_set: &Manifest, val_set: &Manifest, cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let pools = AugmentPools::load(&cfg.augment)?;
    train_with_pools(train_set, val_set, cfg, init, &pools)
}

/// Full training loop.
///
/// Each epoch shuffles the training set, then for every batch: crops each
/// utterance, maybe augments it, computes mean-normalized log-mel features,
/// runs the encoder and margin head, backpropagates and takes one AdamW step
/// on the cosine schedule. Per-utterance randomness comes from streams keyed by
/// (epoch, position), so results do not depend on the number of worker threads.
///
/// When `init` is given its encoder configuration and weights are used; its
/// prototypes are kept if its class list matches the training languages.
pub fn train_with_pools(
    train_set: &Manifest,
    val_set: &Manifest,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    pools: &AugmentPools,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (enc_cfg, feat_cfg, mut params) = match init {
        Some(c) => {
            if c.encoder_config != cfg.encoder || c.features != cfg.features {
                info!("using encoder and feature settings from the initial checkpoint");
            }
            (c.encoder_config.clone(), c.features.clone(), c.params.clone())
        }
        None => (cfg.encoder.clone(), cfg.features.clone(), EncoderParams::init(&cfg.encoder, cfg.seed)?),
    };
    let classes: Vec<String> = train_set.languages().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training manifest has {} language(s), need at least 2",
            classes.len()
        )));
    }
    let label_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut protos = match init {
        Some(c) if c.classes == classes => c.prototypes.clone(),
        Some(_) => {
            info!("class inventory differs from the initial checkpoint; prototypes start fresh");
            ClassPrototypes::init(classes.len(), enc_cfg.embedding_dim, cfg.seed ^ PROTOTYPE_SALT)?
        }
        None => ClassPrototypes::init(classes.len(), enc_cfg.embedding_dim, cfg.seed ^ PROTOTYPE_SALT)?,
    };
    let meta = |epoch: usize| TrainingMeta {
        epoch,
        seed: cfg.seed,
        head: cfg.head,
        crop_seconds: cfg.crop_seconds,
    };
    let snapshot = |params: &EncoderParams, protos: &ClassPrototypes, epoch: usize| {
        Checkpoint::new(
            enc_cfg.clone(),
            feat_cfg.clone(),
            params.clone(),
            protos.clone(),
            classes.clone(),
            meta(epoch),
        )
    };
    if cfg.epochs == 0 {
        let start_epoch = init.map_or(0, |c| c.meta.epoch);
        let ckpt = match init {
            Some(c) if c.classes == classes => c.clone(),
            _ => snapshot(&params, &protos, start_epoch)?,
        };
        return Ok(TrainOutcome {
            best: ckpt.clone(),
            last: ckpt,
            best_epoch: start_epoch,
            log: Vec::new(),
            skipped: Vec::new(),
        });
    }

    let loaded: Vec<Result<Waveform>> = train_set
        .entries
        .par_iter()
        .map(|e| load_wav(train_set.path_of(e)))
        .collect();
    let mut data: Vec<(Waveform, usize)> = Vec::with_capacity(loaded.len());
    let mut skipped = Vec::new();
    for (entry, wave) in train_set.entries.iter().zip(loaded) {
        match wave {
            Ok(w) if !w.is_empty() => data.push((w, label_of[entry.language.as_str()])),
            Ok(_) => {
                warn!("skipping {}: empty waveform", entry.utt_id);
                skipped.push(entry.utt_id.clone());
            }
            Err(e) => {
                warn!("skipping {}: {e}", entry.utt_id);
                skipped.push(entry.utt_id.clone());
            }
        }
    }
    if skipped.len() as f64 > cfg.max_skip_fraction * train_set.len() as f64 || data.is_empty() {
        return Err(Error::Data(format!(
            "{} of {} training utterances unreadable",
            skipped.len(),
            train_set.len()
        )));
    }

    let crop_n = cfg.crop_samples();
    let logmel = LogMel::new(&feat_cfg, SAMPLE_RATE_HZ)?;
    let val: Vec<(FeatureMatrix, usize)> = val_set
        .entries
        .par_iter()
        .map(|e| {
            let label = *label_of
                .get(e.language.as_str())
                .ok_or_else(|| Error::UnknownLabel(e.language.clone()))?;
            let wave = load_wav(val_set.path_of(e)).map_err(|err| Error::Data(format!("{}: {err}", e.utt_id)))?;
            Ok((cmvn(&logmel.compute(&center_crop(&wave, crop_n))?), label))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut ocfg = cfg.optim.clone();
    ocfg.total_steps = cfg.epochs * steps_per_epoch;
    let frozen = |name: &str| cfg.freeze.iter().any(|p| name.starts_with(p.as_str()));

    let mut state = OptimState::default();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let first_epoch = init.map_or(0, |c| c.meta.epoch);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut min_sample, mut lr) = (0.0, f64::INFINITY, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let feats: Vec<FeatureMatrix> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut rng = utterance_rng(cfg.seed, epoch, b * cfg.batch_size + k);
                    let cropped = random_crop(&data[idx].0, crop_n, &mut rng);
                    let wave = maybe_augment(&cropped, &cfg.augment, pools, &mut rng)?;
                    Ok(cmvn(&logmel.compute(&wave)?))
                })
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();

            let (emb, tape) = params.forward(&feats, Mode::Train)?;
            let cos = cosine_logits(&emb, &protos)?;
            let out = head_loss(cfg.head, &cos, &labels, &cfg.margin)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence(format!("loss {} at epoch {} step {step}", out.loss, epoch + 1)));
            }
            let (g_emb, g_proto) = cosine_backward(&out.grad, &emb, &protos, &cos)?;
            let grads = params.backward(&tape, &g_emb)?;
            params.update_running_stats(&tape);

            lr = cosine_lr(step, &ocfg)?;
            let proto_grad = Tensor {
                shape: protos.weights.shape.clone(),
                data: g_proto.data,
            };
            let grad_tensors = grads.named_tensors();
            let mut targets = params.named_tensors_mut();
            let mut slots: Vec<ParamSlot<'_>> = Vec::with_capacity(targets.len() + 1);
            for (p, g) in targets.iter_mut().zip(&grad_tensors) {
                debug_assert_eq!(p.name, g.name);
                if p.kind == TensorKind::Param && !frozen(&p.name) {
                    slots.push(ParamSlot {
                        name: &p.name,
                        value: &mut *p.tensor,
                        grad: g.tensor,
                    });
                }
            }
            if !frozen("head.prototypes") {
                slots.push(ParamSlot {
                    name: "head.prototypes",
                    value: &mut protos.weights,
                    grad: &proto_grad,
                });
            }
            adamw_step(&mut slots, &mut state, &ocfg, lr)?;
            step += 1;

            loss_sum += out.per_sample.iter().sum::<f64>();
            min_sample = out.per_sample.iter().cloned().fold(min_sample, f64::min);
        }

        let val_acc = if val.is_empty() {
            None
        } else {
            let feats: Vec<FeatureMatrix> = val.iter().map(|(f, _)| f.clone()).collect();
            let emb = embed_features(&params, &feats)?;
            let cos = cosine_logits(&emb, &protos)?;
            let mut correct = 0;
            for (i, (_, y)) in val.iter().enumerate() {
                if classify(cos.values.row(i))? == *y {
                    correct += 1;
                }
            }
            Some(correct as f64 / val.len() as f64)
        };
        let entry = EpochLog {
            epoch: first_epoch + epoch + 1,
            train_loss: loss_sum / data.len() as f64,
            min_sample_loss: min_sample,
            val_micro_accuracy: val_acc,
            lr,
            steps: steps_per_epoch,
        };
        info!("{entry}");
        log.push(entry);

        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => val_acc.is_none() || score > *s,
        };
        if improved {
            let epoch_no = first_epoch + epoch + 1;
            best = Some((score, epoch_no, snapshot(&params, &protos, epoch_no)?));
        }
    }
    let last = snapshot(&params, &protos, first_epoch + cfg.epochs)?;
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last,
        best_epoch,
        log,
        skipped,
    })
}
