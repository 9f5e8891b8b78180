//! Ranked retrieval evaluation: mean average precision and CMC.

use std::fmt::Write as _;
use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceKind {
    #[default]
    Euclidean,
    /// `1 − cos`.
    Cosine,
}

/// Query and gallery features with identity and camera labels.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub query: Tensor,
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery: Tensor,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: RetrievalMetrics,
    /// Per query, gallery indices in rank order after exclusion.
    pub rankings: Vec<Vec<usize>>,
    pub average_precisions: Vec<f64>,
}

pub fn pairwise_distances(q: &Tensor, g: &Tensor, kind: DistanceKind) -> Result<Tensor> {
    if q.cols() != g.cols() {
        return Err(Error::dim("pairwise_distances", q.shape(), g.shape()));
    }
    let (nq, ng) = (q.rows(), g.rows());
    let mut d = vec![0.0; nq * ng];
    for i in 0..nq {
        let qi = q.row(i);
        for j in 0..ng {
            let gj = g.row(j);
            d[i * ng + j] = match kind {
                DistanceKind::Euclidean => qi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                DistanceKind::Cosine => {
                    let dot: f64 = qi.iter().zip(gj).map(|(a, b)| a * b).sum();
                    let nq: f64 = qi.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let ng: f64 = gj.iter().map(|b| b * b).sum::<f64>().sqrt();
                    1.0 - dot / (nq * ng).max(1e-12)
                }
            };
        }
    }
    Tensor::new(vec![nq, ng], d)
}

/// `(1/#rel) Σ_k precision@k · rel(k)`.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Contract("average precision needs at least one relevant item".into()));
    }
    Ok(sum / hits as f64)
}

/// Ranks the gallery for every query (ascending distance, ties by gallery
/// index), drops gallery items sharing both identity and camera with the
/// query, and reports mAP and CMC@1/5/10.
pub fn evaluate(set: &EvalSet, kind: DistanceKind) -> Result<Evaluation> {
    let nq = set.query.rows();
    let ng = set.gallery.rows();
    if set.query_ids.len() != nq || set.query_cams.len() != nq {
        return Err(Error::dim("evaluate", set.query.shape(), &[set.query_ids.len(), set.query_cams.len()]));
    }
    if set.gallery_ids.len() != ng || set.gallery_cams.len() != ng {
        return Err(Error::dim("evaluate", set.gallery.shape(), &[set.gallery_ids.len(), set.gallery_cams.len()]));
    }
    if nq == 0 {
        return Err(Error::Contract("evaluation needs at least one query".into()));
    }
    let dist = pairwise_distances(&set.query, &set.gallery, kind)?;
    let mut rankings = Vec::with_capacity(nq);
    let mut aps = Vec::with_capacity(nq);
    let mut cmc = [0usize; 3];
    for q in 0..nq {
        let (qid, qcam) = (set.query_ids[q], set.query_cams[q]);
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| !(set.gallery_ids[j] == qid && set.gallery_cams[j] == qcam))
            .collect();
        let row = dist.row(q);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevance: Vec<bool> = order.iter().map(|&j| set.gallery_ids[j] == qid).collect();
        let first_hit = relevance.iter().position(|&r| r).ok_or_else(|| {
            Error::Contract(format!("query {q} (identity {qid}) has no valid gallery positive"))
        })?;
        aps.push(average_precision(&relevance)?);
        for (slot, k) in [1, 5, 10].into_iter().enumerate() {
            if first_hit < k {
                cmc[slot] += 1;
            }
        }
        rankings.push(order);
    }
    let n = nq as f64;
    Ok(Evaluation {
        metrics: RetrievalMetrics {
            map: aps.iter().sum::<f64>() / n,
            cmc1: cmc[0] as f64 / n,
            cmc5: cmc[1] as f64 / n,
            cmc10: cmc[2] as f64 / n,
            num_queries: nq,
        },
        rankings,
        average_precisions: aps,
    })
}

impl RetrievalMetrics {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "mAP={:?}\nCMC@1={:?}\nCMC@5={:?}\nCMC@10={:?}\nqueries={}\n",
            self.map, self.cmc1, self.cmc5, self.cmc10, self.num_queries
        )
    }
}

impl Evaluation {
    /// One line per query: `query=<i> ranked=<g0> <g1> ...`.
    pub fn ranked_dump(&self) -> String {
        let mut out = String::new();
        for (q, order) in self.rankings.iter().enumerate() {
            let list: Vec<String> = order.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "query={q} ranked={}", list.join(" "));
        }
        out
    }

    pub fn write(&self, results: &Path, ranked: &Path) -> Result<()> {
        write_atomic(results, self.metrics.to_key_values().as_bytes())?;
        write_atomic(ranked, self.ranked_dump().as_bytes())
    }
}
