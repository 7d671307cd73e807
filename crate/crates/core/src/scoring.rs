//! Decision layer: argmax classification and cosine verification scoring.

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Index of the highest score; ties go to the lowest index.
pub fn classify(row: &[f64]) -> Result<usize> {
    if row.len() < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 classes, got {}", row.len())));
    }
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    Ok(best)
}

pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} and {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let (na, nb) = (norm(&a.values), norm(&b.values));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::ZeroNorm("cosine score operand".into()));
    }
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of the length-normalized embeddings, renormalized to unit length.
pub fn enroll_model(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::EmptyEnrollment("no utterances".into()))?;
    let dim = first.values.len();
    let mut sum = vec![0.0; dim];
    for e in embeddings {
        if e.values.len() != dim {
            return Err(Error::ShapeMismatch(format!("enrollment dims {} and {}", dim, e.values.len())));
        }
        let unit = e.normalized()?;
        for (s, v) in sum.iter_mut().zip(&unit.values) {
            *s += v;
        }
    }
    let mean = Embedding {
        values: sum.into_iter().map(|s| s / embeddings.len() as f64).collect(),
    };
    mean.normalized()
        .map_err(|_| Error::ZeroNorm("enrollment embeddings cancel out".into()))
}
