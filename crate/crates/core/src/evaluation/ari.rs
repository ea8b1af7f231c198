//! Adjusted Rand index and segmentation labels.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Contingency-table adjusted Rand index of two labelings. When both
/// partitions are trivial the index is undefined and 1 is returned.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("ari", format!("{} vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Domain {
            op: "ari",
            detail: "empty clustering".into(),
        });
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(pred.len() as u64);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Per-pixel argmax over slot masks `[K, 1, H, W]`; ties go to the lowest
/// slot index.
pub fn argmax_labels<S: Scalar>(masks: &Tensor<S>) -> Result<Vec<usize>> {
    let s = masks.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("argmax_labels", format!("masks {s:?}, expected [K, 1, H, W]")));
    }
    let (k, p) = (s[0], s[2] * s[3]);
    let d = masks.data();
    Ok((0..p)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if d[j * p + i] > d[best * p + i] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Predicted and true labels of the foreground pixels, where `truth[i]` is
/// the object covering pixel `i` or `None` for background.
pub fn foreground_clusterings<S: Scalar>(
    masks: &Tensor<S>,
    truth: &[Option<u8>],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = argmax_labels(masks)?;
    if labels.len() != truth.len() {
        return Err(Error::shape(
            "foreground_clusterings",
            format!("{} mask pixels vs {} labels", labels.len(), truth.len()),
        ));
    }
    Ok(labels
        .iter()
        .zip(truth)
        .filter_map(|(&p, t)| t.map(|t| (p, usize::from(t))))
        .unzip())
}

/// Foreground ARI of a predicted segmentation.
pub fn foreground_ari<S: Scalar>(masks: &Tensor<S>, truth: &[Option<u8>]) -> Result<f64> {
    let (p, t) = foreground_clusterings(masks, truth)?;
    ari(&p, &t)
}

/// Relabels clusters in order of first occurrence.
pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}
