//! Closed-set accuracy and verification EER, plus the plain-text trial files.
//!
//! File formats (whitespace separated, one record per line, `#` comments allowed):
//!
//! ```text
//! scores:       enroll_id test_id score
//! trial key:    enroll_id test_id target|nontarget
//! predictions:  utt_id predicted_label
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub utt_id: String,
    pub truth: String,
    pub predicted: String,
}

/// Predictions over a declared class inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionSet {
    pub inventory: Vec<String>,
    pub items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(inventory: Vec<String>, items: Vec<Prediction>) -> Self {
        PredictionSet { inventory, items }
    }
}

pub fn micro_accuracy(preds: &PredictionSet) -> Result<f64> {
    if preds.items.is_empty() {
        return Err(Error::EmptySet("no predictions".into()));
    }
    let correct = preds.items.iter().filter(|p| p.truth == p.predicted).count();
    Ok(correct as f64 / preds.items.len() as f64)
}

/// Unweighted mean of per-class recall over the whole inventory.
pub fn macro_accuracy(preds: &PredictionSet) -> Result<f64> {
    if preds.items.is_empty() {
        return Err(Error::EmptySet("no predictions".into()));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> =
        preds.inventory.iter().map(|c| (c.as_str(), (0, 0))).collect();
    for p in &preds.items {
        let entry = counts
            .get_mut(p.truth.as_str())
            .ok_or_else(|| Error::UnknownLabel(p.truth.clone()))?;
        entry.1 += 1;
        if p.truth == p.predicted {
            entry.0 += 1;
        }
    }
    if let Some((class, _)) = counts.iter().find(|(_, (_, total))| *total == 0) {
        return Err(Error::EmptyClass(class.to_string()));
    }
    Ok(mean_of_ratios(&counts.values().copied().collect::<Vec<_>>()))
}

/// Mean of `correct / total` pairs. Evaluated as one rational over the least
/// common multiple of the totals when that fits, so a single rounding occurs
/// and balanced sets give exactly the micro value.
fn mean_of_ratios(pairs: &[(usize, usize)]) -> f64 {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    let exact = pairs
        .iter()
        .try_fold(1u128, |l, &(_, t)| (l / gcd(l, t as u128)).checked_mul(t as u128))
        .and_then(|l| {
            let num = pairs
                .iter()
                .try_fold(0u128, |acc, &(c, t)| acc.checked_add(c as u128 * (l / t as u128)))?;
            let den = l.checked_mul(pairs.len() as u128)?;
            let g = gcd(num, den);
            let (num, den) = (num / g, den / g);
            (den < 1 << 53).then(|| num as f64 / den as f64)
        });
    exact.unwrap_or_else(|| pairs.iter().map(|&(c, t)| c as f64 / t as f64).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" | "tgt" | "1" => Ok(TrialLabel::Target),
            "nontarget" | "non" | "imp" | "0" => Ok(TrialLabel::Nontarget),
            "unknown" | "?" => Ok(TrialLabel::Unknown),
            other => Err(Error::parse("trial label", format!("unrecognized label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate with linear interpolation between sweep points.
///
/// A trial is accepted when `score >= threshold`. Thresholds are the sorted
/// unique scores followed by +∞; FAR − FRR falls from 1 to −1 along the sweep
/// and the EER is read off where it crosses zero. Unlabeled records are ignored.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EerResult> {
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if !r.score.is_finite() {
            return Err(Error::NonFiniteScore(i));
        }
        match r.label {
            TrialLabel::Target => scored.push((r.score, true)),
            TrialLabel::Nontarget => scored.push((r.score, false)),
            TrialLabel::Unknown => {}
        }
    }
    let n_tar = scored.iter().filter(|(_, t)| *t).count();
    let n_non = scored.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::DegenerateLabels);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (threshold, FAR, FRR) at each unique score, then at +∞.
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        points.push((
            t,
            (n_non - non_below) as f64 / n_non as f64,
            tar_below as f64 / n_tar as f64,
        ));
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));
    Ok(interpolate_crossing(&points))
}

pub(crate) fn interpolate_crossing(points: &[(f64, f64, f64)]) -> EerResult {
    let diff = |p: &(f64, f64, f64)| p.1 - p.2;
    let k = points.iter().position(|p| diff(p) <= 0.0).expect("sweep ends at FAR − FRR = −1");
    let (t1, far1, frr1) = points[k];
    if diff(&points[k]) == 0.0 || k == 0 {
        return EerResult { eer: far1, threshold: t1 };
    }
    let (t0, far0, frr0) = points[k - 1];
    let (d0, d1) = (far0 - frr0, far1 - frr1);
    let lambda = d0 / (d0 - d1);
    let far = far0 + lambda * (far1 - far0);
    let frr = frr0 + lambda * (frr1 - frr0);
    let threshold = if t1.is_finite() { t0 + lambda * (t1 - t0) } else { t0 };
    EerResult {
        eer: 0.5 * (far + frr),
        threshold,
    }
}

fn records<R: BufRead>(reader: R, what: &str, fields: usize) -> impl Iterator<Item = Result<(usize, Vec<String>)>> {
    let what = what.to_string();
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let parts: Vec<String> = trimmed.split_whitespace().map(str::to_string).collect();
        if parts.len() != fields {
            return Some(Err(Error::parse(
                format!("{what} line {}", i + 1),
                format!("expected {fields} fields, found {}", parts.len()),
            )));
        }
        Some(Ok((i + 1, parts)))
    })
}

pub fn read_scores<R: BufRead>(reader: R) -> Result<Vec<ScoreRecord>> {
    records(reader, "score file", 3)
        .map(|r| {
            let (line, p) = r?;
            let score: f64 = p[2]
                .parse()
                .map_err(|_| Error::parse(format!("score file line {line}"), format!("bad score {:?}", p[2])))?;
            Ok(ScoreRecord {
                enroll_id: p[0].clone(),
                test_id: p[1].clone(),
                score,
                label: TrialLabel::Unknown,
            })
        })
        .collect()
}

pub fn write_scores<W: Write>(mut w: W, records: &[ScoreRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{} {} {}", r.enroll_id, r.test_id, r.score)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialKey {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

pub fn read_key<R: BufRead>(reader: R) -> Result<Vec<TrialKey>> {
    records(reader, "trial key", 3)
        .map(|r| {
            let (line, p) = r?;
            let label = p[2]
                .parse()
                .map_err(|_| Error::parse(format!("trial key line {line}"), format!("bad label {:?}", p[2])))?;
            Ok(TrialKey {
                enroll_id: p[0].clone(),
                test_id: p[1].clone(),
                label,
            })
        })
        .collect()
}

pub fn write_key<W: Write>(mut w: W, key: &[TrialKey]) -> Result<()> {
    for k in key {
        writeln!(w, "{} {} {}", k.enroll_id, k.test_id, k.label)?;
    }
    Ok(())
}

/// Labels every score from the key; a score without a key entry is an error.
pub fn attach_labels(scores: &[ScoreRecord], key: &[TrialKey]) -> Result<Vec<ScoreRecord>> {
    let lookup: HashMap<(&str, &str), TrialLabel> = key
        .iter()
        .map(|k| ((k.enroll_id.as_str(), k.test_id.as_str()), k.label))
        .collect();
    scores
        .iter()
        .map(|s| {
            let label = lookup
                .get(&(s.enroll_id.as_str(), s.test_id.as_str()))
                .ok_or_else(|| Error::MissingUtterance(format!("no key entry for trial {} {}", s.enroll_id, s.test_id)))?;
            Ok(ScoreRecord { label: *label, ..s.clone() })
        })
        .collect()
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<(String, String)>> {
    records(reader, "prediction file", 2)
        .map(|r| r.map(|(_, mut p)| (p.remove(0), p.remove(0))))
        .collect()
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        writeln!(w, "{} {}", p.utt_id, p.predicted)?;
    }
    Ok(())
}

pub fn open_reader(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(std::io::BufReader::new(std::fs::File::open(path)?))
}
