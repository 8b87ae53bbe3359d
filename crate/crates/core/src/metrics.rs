//! Retrieval metrics: Rank-k and mean average precision over a
//! query × gallery similarity matrix.
//!
//! Ranking is by descending similarity with ties broken toward the lower
//! gallery index, so every metric is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Headline retrieval numbers for one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    pub seed: u64,
}

impl RetrievalReport {
    pub fn from_similarity(
        sim: &[f64],
        query_ids: &[u64],
        gallery_ids: &[u64],
        seed: u64,
    ) -> Result<RetrievalReport> {
        Ok(RetrievalReport {
            rank1: rank_k(sim, query_ids, gallery_ids, 1)?,
            rank5: rank_k(sim, query_ids, gallery_ids, 5)?,
            rank10: rank_k(sim, query_ids, gallery_ids, 10)?,
            map: mean_ap(sim, query_ids, gallery_ids)?,
            n_queries: query_ids.len(),
            n_gallery: gallery_ids.len(),
            seed,
        })
    }
}

fn check_inputs(sim: &[f64], query_ids: &[u64], gallery_ids: &[u64], op: &'static str) -> Result<()> {
    let (q, g) = (query_ids.len(), gallery_ids.len());
    if q == 0 || g == 0 {
        return Err(Error::InvalidArgument {
            op,
            msg: "empty query or gallery".into(),
        });
    }
    if sim.len() != q * g {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("similarity has {} entries, expected {q}x{g}", sim.len()),
        });
    }
    if let Some(pos) = sim.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("non-finite similarity at flat index {pos}"),
        });
    }
    Ok(())
}

/// Gallery indices of one query's row, best first (descending similarity,
/// ties toward the lower index).
fn ranked_gallery(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("similarities checked finite")
            .then(a.cmp(&b))
    });
    order
}

/// Fraction of queries whose top-k ranked gallery items contain at least one
/// identity match.
pub fn rank_k(sim: &[f64], query_ids: &[u64], gallery_ids: &[u64], k: usize) -> Result<f64> {
    check_inputs(sim, query_ids, gallery_ids, "rank_k")?;
    let g = gallery_ids.len();
    if k == 0 || k > g {
        return Err(Error::InvalidArgument {
            op: "rank_k",
            msg: format!("k = {k} outside gallery size {g}"),
        });
    }
    let mut hits = 0usize;
    for (qi, &qid) in query_ids.iter().enumerate() {
        let row = &sim[qi * g..(qi + 1) * g];
        let order = ranked_gallery(row);
        if order[..k].iter().any(|&j| gallery_ids[j] == qid) {
            hits += 1;
        }
    }
    Ok(hits as f64 / query_ids.len() as f64)
}

/// Mean average precision: per query, AP = mean over its matches' 1-based
/// ranks r of (matches seen up to r) / r; mAP = mean of APs over queries.
/// A query with no gallery match is a data error (it would silently zero the
/// mean).
pub fn mean_ap(sim: &[f64], query_ids: &[u64], gallery_ids: &[u64]) -> Result<f64> {
    check_inputs(sim, query_ids, gallery_ids, "mean_ap")?;
    let g = gallery_ids.len();
    let mut ap_sum = 0.0;
    for (qi, &qid) in query_ids.iter().enumerate() {
        let row = &sim[qi * g..(qi + 1) * g];
        let order = ranked_gallery(row);
        let mut matches = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_ids[j] == qid {
                matches += 1;
                precision_sum += matches as f64 / (pos + 1) as f64;
            }
        }
        if matches == 0 {
            return Err(Error::Data(format!(
                "query {qi} (identity {qid}) has no gallery match; \
                 average precision is undefined for it"
            )));
        }
        ap_sum += precision_sum / matches as f64;
    }
    Ok(ap_sum / query_ids.len() as f64)
}
