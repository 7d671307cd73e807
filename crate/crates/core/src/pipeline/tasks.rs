use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use crate::encoder::{Embedding, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::features::{cmvn, load_wav, FeatureMatrix, LogMel, Waveform, SAMPLE_RATE_HZ};
use crate::heads::cosine_logits;
use crate::metrics::{
    attach_labels, compute_eer, macro_accuracy, micro_accuracy, EerResult, Prediction, PredictionSet, ScoreRecord,
    TrialKey, TrialLabel,
};
use crate::scoring::{classify, cosine_score, enroll_model};
use crate::synthkit::Manifest;
use crate::tensor::Mat;

const EMBED_CHUNK: usize = 16;

/// Embeddings keyed by utterance id.
pub type EmbeddingTable = BTreeMap<String, Embedding>;

/// Takes the central `n` samples, or zero-pads at the end when shorter.
pub fn center_crop(wave: &Waveform, n: usize) -> Waveform {
    let samples = if wave.len() >= n {
        let start = (wave.len() - n) / 2;
        wave.samples[start..start + n].to_vec()
    } else {
        let mut s = wave.samples.clone();
        s.resize(n, 0.0);
        s
    };
    Waveform {
        samples,
        sample_rate_hz: wave.sample_rate_hz,
    }
}

/// Eval-mode embeddings for a list of feature matrices, one row each.
pub fn embed_features(params: &EncoderParams, feats: &[FeatureMatrix]) -> Result<Mat> {
    let mut parts = Vec::with_capacity(feats.len().div_ceil(EMBED_CHUNK));
    for chunk in feats.chunks(EMBED_CHUNK) {
        parts.push(params.forward(chunk, Mode::Eval)?.0);
    }
    if parts.is_empty() {
        return Ok(Mat::zeros(0, 0));
    }
    Mat::vstack(&parts.iter().collect::<Vec<_>>())
}

fn eval_features(manifest: &Manifest, ckpt: &Checkpoint) -> Result<Vec<FeatureMatrix>> {
    let logmel = LogMel::new(&ckpt.features, SAMPLE_RATE_HZ)?;
    let crop_n = (ckpt.meta.crop_seconds * f64::from(SAMPLE_RATE_HZ)).round() as usize;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let wave = load_wav(manifest.path_of(e)).map_err(|err| Error::Data(format!("{}: {err}", e.utt_id)))?;
            Ok(cmvn(&logmel.compute(&center_crop(&wave, crop_n))?))
        })
        .collect()
}

/// Embeds every utterance of the manifest with the checkpoint's encoder in eval mode.
pub fn extract_embeddings(manifest: &Manifest, ckpt: &Checkpoint) -> Result<EmbeddingTable> {
    let feats = eval_features(manifest, ckpt)?;
    let emb = embed_features(&ckpt.params, &feats)?;
    Ok(manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (
                e.utt_id.clone(),
                Embedding {
                    values: emb.row(i).to_vec(),
                },
            )
        })
        .collect())
}

/// One line per utterance: `utt_id v1 v2 …`, values in round-trip decimal form.
pub fn write_embeddings<W: Write>(mut w: W, table: &EmbeddingTable) -> Result<()> {
    for (id, e) in table {
        write!(w, "{id}")?;
        for v in &e.values {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::parse(format!("embedding line {}", i + 1), format!("bad value {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        table.insert(id.to_string(), Embedding { values });
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task1Report {
    pub predictions: Vec<Prediction>,
    pub micro_accuracy: f64,
    pub macro_accuracy: f64,
}

impl Task1Report {
    pub fn summary(&self) -> String {
        format!(
            "utterances {}\nmicro_accuracy {:.6}\nmacro_accuracy {:.6}\n",
            self.predictions.len(),
            self.micro_accuracy,
            self.macro_accuracy
        )
    }
}

/// Closed-set predictions for utterances whose embeddings are already known.
pub fn classify_embeddings(manifest: &Manifest, table: &EmbeddingTable, ckpt: &Checkpoint) -> Result<Vec<Prediction>> {
    let mut rows = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        if !ckpt.classes.contains(&e.language) {
            return Err(Error::UnknownLabel(e.language.clone()));
        }
        let emb = table
            .get(&e.utt_id)
            .ok_or_else(|| Error::MissingUtterance(e.utt_id.clone()))?;
        rows.extend_from_slice(&emb.values);
    }
    if manifest.is_empty() {
        return Ok(Vec::new());
    }
    let emb = Mat::from_vec(manifest.len(), ckpt.prototypes.dim(), rows)?;
    let cos = cosine_logits(&emb, &ckpt.prototypes)?;
    manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Prediction {
                utt_id: e.utt_id.clone(),
                truth: e.language.clone(),
                predicted: ckpt.classes[classify(cos.values.row(i))?].clone(),
            })
        })
        .collect()
}

/// Language classification over a labelled manifest, with both accuracies.
pub fn run_task1(manifest: &Manifest, ckpt: &Checkpoint) -> Result<Task1Report> {
    if let Some(e) = manifest.entries.iter().find(|e| !ckpt.classes.contains(&e.language)) {
        return Err(Error::UnknownLabel(e.language.clone()));
    }
    let table = extract_embeddings(manifest, ckpt)?;
    let predictions = classify_embeddings(manifest, &table, ckpt)?;
    let set = PredictionSet::new(ckpt.classes.clone(), predictions);
    Ok(Task1Report {
        micro_accuracy: micro_accuracy(&set)?,
        macro_accuracy: macro_accuracy(&set)?,
        predictions: set.items,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task2Report {
    pub scores: Vec<ScoreRecord>,
    pub eer: Option<EerResult>,
}

impl Task2Report {
    pub fn summary(&self) -> String {
        let mut s = format!("trials {}\n", self.scores.len());
        if let Some(e) = self.eer {
            s.push_str(&format!("eer {:.6}\nthreshold {:.6}\n", e.eer, e.threshold));
        }
        s
    }
}

/// Cosine score per trial between the enrollment model and the test embedding.
pub fn score_trials(
    trials: &[(String, String)],
    enrollment: &BTreeMap<String, Vec<String>>,
    table: &EmbeddingTable,
) -> Result<Vec<ScoreRecord>> {
    let lookup = |id: &str| table.get(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
    let mut models: BTreeMap<&str, Embedding> = BTreeMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for (enroll_id, test_id) in trials {
        if !models.contains_key(enroll_id.as_str()) {
            let utts = enrollment
                .get(enroll_id)
                .ok_or_else(|| Error::MissingUtterance(format!("enrollment {enroll_id}")))?;
            let embs = utts.iter().map(|u| lookup(u).cloned()).collect::<Result<Vec<_>>>()?;
            models.insert(enroll_id, enroll_model(&embs)?);
        }
        let score = cosine_score(&models[enroll_id.as_str()], lookup(test_id)?)?;
        out.push(ScoreRecord {
            enroll_id: enroll_id.clone(),
            test_id: test_id.clone(),
            score,
            label: TrialLabel::Unknown,
        });
    }
    Ok(out)
}

/// Verification scoring; the EER is computed only when a key is supplied.
pub fn run_task2(
    trials: &[(String, String)],
    enrollment: &BTreeMap<String, Vec<String>>,
    table: &EmbeddingTable,
    key: Option<&[TrialKey]>,
) -> Result<Task2Report> {
    let scores = score_trials(trials, enrollment, table)?;
    match key {
        Some(k) => {
            let labeled = attach_labels(&scores, k)?;
            let eer = compute_eer(&labeled)?;
            Ok(Task2Report {
                scores: labeled,
                eer: Some(eer),
            })
        }
        None => Ok(Task2Report { scores, eer: None }),
    }
}

/// Embeds only the utterances a trial list needs, then scores it.
pub fn run_task2_with_checkpoint(
    trials: &[(String, String)],
    enrollment: &BTreeMap<String, Vec<String>>,
    manifest: &Manifest,
    ckpt: &Checkpoint,
    key: Option<&[TrialKey]>,
) -> Result<Task2Report> {
    let mut needed: std::collections::BTreeSet<&str> = trials.iter().map(|(_, t)| t.as_str()).collect();
    for (e, _) in trials {
        if let Some(utts) = enrollment.get(e) {
            needed.extend(utts.iter().map(String::as_str));
        }
    }
    let subset = manifest.filter(|e| needed.contains(e.utt_id.as_str()));
    let table = extract_embeddings(&subset, ckpt)?;
    run_task2(trials, enrollment, &table, key)
}
