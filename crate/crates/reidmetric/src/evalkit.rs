//! Retrieval evaluation: cosine ranking, cross-camera validity
//! filtering, average precision, CMC, and the centroid-separation probe.

use crate::data::SampleRecord;
use crate::numkit::{self, Matrix, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RankedList {
    /// Gallery indices by ascending cosine distance, ties broken by
    /// ascending index.
    pub order: Vec<usize>,
    /// Distances aligned with `order`.
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub map: f64,
    /// cmc[k-1] = fraction of queries with a match at rank <= k.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    pub num_valid_queries: usize,
}

impl EvalResult {
    pub fn rank_k(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).copied().unwrap_or(1.0)
    }
}

pub fn rank_gallery(query_embedding: &[f64], gallery: &Matrix) -> Result<RankedList> {
    if gallery.rows() == 0 {
        return Err(Error::EmptyGallery);
    }
    let mut entries: Vec<(usize, f64)> = (0..gallery.rows())
        .map(|i| Ok((i, numkit::cosine_distance(query_embedding, gallery.row(i))?)))
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(RankedList {
        order: entries.iter().map(|e| e.0).collect(),
        distances: entries.iter().map(|e| e.1).collect(),
    })
}

/// Standard protocol: a gallery entry is junk for a query iff it shares
/// both person id and camera id.
pub fn valid_mask(query: &SampleRecord, gallery: &[SampleRecord]) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| !(g.person_id == query.person_id && g.camera_id == query.camera_id))
        .collect()
}

/// AP over a ranked relevance sequence (junk entries already removed).
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return Err(Error::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

/// Rank-k accuracies from per-query relevance sequences.
pub fn cmc(relevance_per_query: &[Vec<bool>], max_k: usize) -> Vec<f64> {
    let mut curve = vec![0.0; max_k];
    let n = relevance_per_query.len();
    for rel in relevance_per_query {
        if let Some(first) = rel.iter().position(|&r| r) {
            for k in first..max_k {
                curve[k] += 1.0;
            }
        }
    }
    if n > 0 {
        for c in &mut curve {
            *c /= n as f64;
        }
    }
    curve
}

/// Full protocol: rank, filter junk, AP + CMC per query, mAP over
/// queries that have at least one valid relevant gallery entry.
pub fn evaluate(
    queries: &[SampleRecord],
    query_embeddings: &Matrix,
    gallery: &[SampleRecord],
    gallery_embeddings: &Matrix,
    max_k: usize,
) -> Result<EvalResult> {
    if queries.len() != query_embeddings.rows() || gallery.len() != gallery_embeddings.rows() {
        return Err(Error::ShapeMismatch(
            "embeddings not aligned with records".into(),
        ));
    }
    if query_embeddings.cols() != gallery_embeddings.cols() {
        return Err(Error::DimMismatch(query_embeddings.cols(), gallery_embeddings.cols()));
    }
    let mut per_query_ap = Vec::new();
    let mut relevances = Vec::new();
    for (qi, query) in queries.iter().enumerate() {
        let ranked = rank_gallery(query_embeddings.row(qi), gallery_embeddings)?;
        let mask = valid_mask(query, gallery);
        let relevance: Vec<bool> = ranked
            .order
            .iter()
            .filter(|&&g| mask[g])
            .map(|&g| gallery[g].person_id == query.person_id)
            .collect();
        match average_precision(&relevance) {
            Ok(ap) => {
                per_query_ap.push(ap);
                relevances.push(relevance);
            }
            Err(Error::NoRelevant) => continue,
            Err(e) => return Err(e),
        }
    }
    let num_valid_queries = per_query_ap.len();
    let map = if num_valid_queries > 0 {
        per_query_ap.iter().sum::<f64>() / num_valid_queries as f64
    } else {
        0.0
    };
    Ok(EvalResult { map, cmc: cmc(&relevances, max_k), per_query_ap, num_valid_queries })
}

/// Mean pairwise cosine distance between the centroids of `num_ids`
/// randomly chosen identities holding at least `min_images` embeddings.
pub fn centroid_separation(
    embeddings: &Matrix,
    records: &[SampleRecord],
    num_ids: usize,
    min_images: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if records.len() != embeddings.rows() {
        return Err(Error::ShapeMismatch(
            "embeddings not aligned with records".into(),
        ));
    }
    let mut by_id: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.entry(r.person_id).or_default().push(i);
    }
    let mut qualifying: Vec<u32> = by_id
        .iter()
        .filter(|(_, v)| v.len() >= min_images)
        .map(|(id, _)| *id)
        .collect();
    qualifying.sort_unstable();
    if qualifying.len() < num_ids {
        return Err(Error::InsufficientIdentities { need: num_ids, have: qualifying.len() });
    }
    rng.shuffle(&mut qualifying);
    let chosen = &qualifying[..num_ids];

    let dim = embeddings.cols();
    let centroids: Vec<Vec<f64>> = chosen
        .iter()
        .map(|id| {
            let rows = &by_id[id];
            let mut c = vec![0.0; dim];
            for &r in rows {
                for (acc, v) in c.iter_mut().zip(embeddings.row(r)) {
                    *acc += v;
                }
            }
            for v in &mut c {
                *v /= rows.len() as f64;
            }
            c
        })
        .collect();

    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            sum += numkit::cosine_distance(&centroids[i], &centroids[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}
