//! Label-smoothed cross-entropy and batch-hard triplet losses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Mean over rows of `−Σ_c q_c log softmax(logits)_c`, `q = (1−ε)·onehot + ε/C`.
pub fn ce_label_smooth<'t>(logits: &Var<'t>, labels: &[usize], eps: f64) -> Result<Var<'t>> {
    let lv = logits.value();
    let (rows, classes) = (lv.rows(), lv.cols());
    if labels.len() != rows {
        return Err(Error::dim("ce_label_smooth", lv.shape(), &[labels.len()]));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("label smoothing {eps} outside [0, 1)")));
    }
    let mut target = vec![eps / classes as f64; rows * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Contract(format!(
                "label {label} at row {r} out of range for {classes} classes"
            )));
        }
        target[r * classes + label] += 1.0 - eps;
    }
    let target = logits.tape().constant(Tensor::new(lv.shape().to_vec(), target)?);
    Ok(logits
        .log_softmax_rows()?
        .mul(&target)?
        .sum()
        .scale(-1.0 / rows as f64))
}

/// Hardest positive and hardest negative per anchor, chosen from distance
/// values. Ties resolve to the lowest index.
pub fn hardest_pairs(dist: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Contract(format!(
            "identity {id} has a single sample in the batch; triplet loss needs at least two"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Contract("triplet loss needs at least two identities in the batch".into()));
    }
    Ok((0..b)
        .map(|a| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..b {
                let d = dist.at(a, j);
                if labels[j] == labels[a] {
                    if j != a && d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            (pos.0, neg.0)
        })
        .collect())
}

/// Batch-hard triplet loss on Euclidean distances:
/// mean over anchors of `max(0, margin + d(a, p*) − d(a, n*))`.
pub fn triplet_batch_hard<'t>(features: &Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let fv = features.value();
    if fv.rows() != labels.len() {
        return Err(Error::dim("triplet_batch_hard", fv.shape(), &[labels.len()]));
    }
    let dist = features.pairwise_distances()?;
    let b = labels.len();
    let pairs = hardest_pairs(&dist.value(), labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(a, &(p, _))| a * b + p).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(a, &(_, n))| a * b + n).collect();
    let margin = features.tape().constant(Tensor::scalar(margin));
    Ok(dist
        .gather(&pos)?
        .sub(&dist.gather(&neg)?)?
        .add(&margin)?
        .relu()
        .mean())
}

/// Both losses on one supervised feature.
pub fn supervised_loss<'t>(
    logits: &Var<'t>,
    features: &Var<'t>,
    labels: &[usize],
    eps: f64,
    margin: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        ce_label_smooth(logits, labels, eps)?,
        triplet_batch_hard(features, labels, margin)?,
    ))
}
