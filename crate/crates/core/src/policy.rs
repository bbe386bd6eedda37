//! Masked linear policy over vacant locations.

use crate::error::{Error, Result};

/// Argmax of `row` restricted to `vacant`; ties go to the lowest location.
pub fn masked_argmax(row: &[f64], vacant: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &l in vacant {
        let v = *row.get(l).ok_or(Error::UnknownLocation(l))?;
        best = match best {
            None => Some((l, v)),
            Some((bl, bv)) if v > bv || (v == bv && l < bl) => Some((l, v)),
            keep => keep,
        };
    }
    best.map(|(l, _)| l).ok_or(Error::NoVacancy)
}

/// Softmax of `row` over `vacant`, returned in `vacant` order.
pub fn masked_softmax(row: &[f64], vacant: &[usize]) -> Result<Vec<f64>> {
    if vacant.is_empty() {
        return Err(Error::NoVacancy);
    }
    let mut logits = Vec::with_capacity(vacant.len());
    for &l in vacant {
        logits.push(*row.get(l).ok_or(Error::UnknownLocation(l))?);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Full-length distribution over all `L` locations; occupied ones get exactly 0.
pub fn action_distribution(row: &[f64], vacant: &[usize]) -> Result<Vec<f64>> {
    let probs = masked_softmax(row, vacant)?;
    let mut out = vec![0.0; row.len()];
    for (&l, p) in vacant.iter().zip(probs) {
        out[l] = p;
    }
    Ok(out)
}

/// `-ln p(label)` for a full-length distribution.
pub fn cross_entropy_loss(dist: &[f64], label: usize) -> Result<f64> {
    match dist.get(label) {
        Some(&p) if p > 0.0 => Ok(-p.ln()),
        _ => Err(Error::LabelOutsideSupport(label)),
    }
}

pub fn mean_cross_entropy(batch: &[(&[f64], usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(dist, label) in batch {
        total += cross_entropy_loss(dist, label)?;
    }
    Ok(total / batch.len() as f64)
}
