//! Retrieval features, distance matrices and mAP/CMC under the usual Re-ID
//! protocol (same identity and camera as the query is junk).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_images, encode_texts, fuse, ModelConfig};
use crate::image::{ImageMaskPlan, PatchGrid};
use crate::numerics::Graph;
use crate::params::ParamStore;
use crate::text::empty_sequence;
use crate::training::{FeatureSource, PreparedSample};
use crate::{Error, Result};

const FEATURE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

/// One L2-normalized feature row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
    pub meta: Vec<ItemMeta>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>, meta: Vec<ItemMeta>) -> Result<Self> {
        if data.len() != dim * meta.len() {
            return Err(Error::Usage(format!(
                "{} values do not form {} rows of {dim}",
                data.len(),
                meta.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eval("non-finite feature value".into()));
        }
        Ok(Self { dim, data, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            data: indices.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            meta: indices.iter().map(|&i| self.meta[i]).collect(),
        }
    }
}

fn normalize(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Image-only inference: `h_CLS_I`, or `h_CLS_M` with an empty caption.
pub fn extract_features(
    params: &ParamStore,
    model: &ModelConfig,
    samples: &[PreparedSample],
    source: FeatureSource,
) -> Result<FeatureMatrix> {
    let dim = match source {
        FeatureSource::ClsI => model.image.width,
        FeatureSource::ClsM => model.fusion.width,
    };
    let empty = empty_sequence(model.text_len)?;

    let mut data = Vec::with_capacity(samples.len() * dim);
    for chunk in samples.chunks(FEATURE_CHUNK) {
        let graph = Graph::new();
        let p = params.bind(&graph, false);
        let grids: Vec<&PatchGrid> = chunk.iter().map(|s| &s.grid).collect();
        let none: Vec<Option<&ImageMaskPlan>> = vec![None; chunk.len()];
        let img = encode_images(&p, model, &grids, &none)?;
        let cls = match source {
            FeatureSource::ClsI => img.cls()?,
            FeatureSource::ClsM => {
                let txt = encode_texts(&p, model, &[&empty])?;
                let pairs: Vec<(usize, usize)> = (0..chunk.len()).map(|i| (i, 0)).collect();
                fuse(&p, model, &img, &txt, &[&empty.attention], &pairs)?.cls()?
            }
        };
        let mut rows = cls.to_vec();
        rows.chunks_mut(dim).for_each(normalize);
        data.extend(rows);
    }
    let meta = samples
        .iter()
        .map(|s| ItemMeta {
            identity: s.identity,
            camera: s.camera,
        })
        .collect();
    FeatureMatrix::new(dim, data, meta)
}

/// Pairwise Euclidean distances, `[query][gallery]`.
pub fn distance_matrix(query: &FeatureMatrix, gallery: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    if query.dim != gallery.dim {
        return Err(Error::Usage(format!(
            "feature dimensions differ: {} and {}",
            query.dim, gallery.dim
        )));
    }
    Ok((0..query.len())
        .map(|i| {
            let q = query.row(i);
            (0..gallery.len())
                .map(|j| {
                    q.iter()
                        .zip(gallery.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    /// Absent when the query has no valid match in the gallery.
    pub ap: Option<f64>,
    /// 0-based rank of the first match after junk removal.
    pub first_match: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// `cmc[k]`: fraction of valid queries with a match in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub queries: Vec<QueryResult>,
    pub valid_queries: usize,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).copied().unwrap_or(1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "mAP": self.map,
            "cmc": self.cmc,
            "valid_queries": self.valid_queries,
            "total_queries": self.queries.len(),
        }))
        .expect("serializable")
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query,ap,first_match_rank\n");
        for q in &self.queries {
            let ap = q.ap.map(|v| format!("{v}")).unwrap_or_default();
            let rank = q.first_match.map(|r| format!("{}", r + 1)).unwrap_or_default();
            let _ = writeln!(out, "{},{ap},{rank}", q.query);
        }
        out
    }
}

/// Average precision and first-match rank for one query, from the gallery
/// order. Junk items are removed before ranks are counted.
fn score_query(order: &[usize], query: ItemMeta, gallery: &[ItemMeta]) -> (Option<f64>, Option<usize>) {
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for &g in order {
        let item = gallery[g];
        let same_id = item.identity == query.identity;
        if same_id && item.camera == query.camera {
            continue;
        }
        rank += 1;
        if same_id {
            hits += 1;
            precision_sum += hits as f64 / rank as f64;
            first.get_or_insert(rank - 1);
        }
    }
    if hits == 0 {
        (None, None)
    } else {
        (Some(precision_sum / hits as f64), first)
    }
}

pub fn evaluate(
    distmat: &[Vec<f64>],
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    max_rank: usize,
) -> Result<EvalResult> {
    if distmat.len() != query.len() || distmat.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::Usage(format!(
            "distance matrix is not {}×{}",
            query.len(),
            gallery.len()
        )));
    }
    if max_rank == 0 {
        return Err(Error::Usage("max_rank must be at least 1".into()));
    }
    let mut queries = Vec::with_capacity(query.len());
    let mut cmc_counts = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (qi, row) in distmat.iter().enumerate() {
        if row.iter().any(|d| d.is_nan()) {
            return Err(Error::Eval(format!("NaN distance in query row {qi}")));
        }
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        // stable: equal distances keep gallery order
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let (ap, first) = score_query(&order, query[qi], gallery);
        if let (Some(ap), Some(first)) = (ap, first) {
            valid += 1;
            ap_sum += ap;
            for c in cmc_counts.iter_mut().skip(first) {
                *c += 1;
            }
        }
        queries.push(QueryResult {
            query: qi,
            ap,
            first_match: first,
        });
    }
    if valid == 0 {
        return Err(Error::Eval("no query has a valid match in the gallery".into()));
    }
    Ok(EvalResult {
        map: ap_sum / valid as f64,
        cmc: cmc_counts.iter().map(|&c| c as f64 / valid as f64).collect(),
        queries,
        valid_queries: valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(identity: usize, camera: usize) -> ItemMeta {
        ItemMeta { identity, camera }
    }

    #[test]
    fn distance_examples() {
        let a = FeatureMatrix::new(2, vec![1.0, 0.0], vec![meta(0, 0)]).unwrap();
        let b = FeatureMatrix::new(2, vec![0.0, 1.0], vec![meta(0, 0)]).unwrap();
        assert_eq!(distance_matrix(&a, &a).unwrap(), vec![vec![0.0]]);
        assert!((distance_matrix(&a, &b).unwrap()[0][0] - 2f64.sqrt()).abs() < 1e-15);
        let c = FeatureMatrix::new(3, vec![0.0; 3], vec![meta(0, 0)]).unwrap();
        assert!(matches!(distance_matrix(&a, &c), Err(Error::Usage(_))));
    }

    #[test]
    fn perfect_retrieval() {
        let q = [meta(0, 0), meta(1, 0)];
        let g = [meta(0, 1), meta(1, 1)];
        let d = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let r = evaluate(&d, &q, &g, 2).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc, vec![1.0, 1.0]);
    }

    #[test]
    fn ap_for_matches_at_one_and_three() {
        let q = [meta(0, 0)];
        let g = [meta(0, 1), meta(1, 1), meta(0, 2), meta(2, 1)];
        let d = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let r = evaluate(&d, &q, &g, 4).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn junk_only_query_is_skipped() {
        let q = [meta(0, 0), meta(1, 0)];
        let g = [meta(0, 0), meta(1, 1), meta(2, 0)];
        let d = vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.1, 0.2]];
        let r = evaluate(&d, &q, &g, 3).unwrap();
        assert_eq!(r.valid_queries, 1);
        assert_eq!(r.queries[0].ap, None);
        assert_eq!(r.map, 1.0);
        let only_junk = evaluate(&d[..1], &q[..1], &g, 3).unwrap_err();
        assert!(matches!(only_junk, Error::Eval(_)));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = [meta(0, 0)];
        let g = [meta(1, 1), meta(0, 1)];
        let r = evaluate(&[vec![0.5, 0.5]], &q, &g, 2).unwrap();
        assert_eq!(r.queries[0].first_match, Some(1));
        assert!((r.map - 0.5).abs() < 1e-15);
    }
}
