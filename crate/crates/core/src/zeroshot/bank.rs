use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::loss::normalize_rows;
use crate::data::StimulusRecord;
use crate::embed::{CatalogEmbeddings, EmbeddingBatch, Providers};
use crate::error::{Error, Result};

/// Frozen test-split gallery: one image template per test image and one
/// coarse-text template per test category, rows sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub image_ids: Vec<i64>,
    pub image_templates: Array2<f64>,
    pub category_ids: Vec<i64>,
    pub category_templates: Array2<f64>,
    pub fingerprint: String,
}

fn check_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Degenerate(format!("{what} template {i} is zero or non-finite")));
        }
    }
    Ok(())
}

impl TemplateBank {
    pub fn from_parts(
        image_ids: Vec<i64>,
        image_templates: Array2<f64>,
        category_ids: Vec<i64>,
        category_templates: Array2<f64>,
        provider_fingerprint: &str,
    ) -> Result<Self> {
        if image_ids.len() != image_templates.nrows() || category_ids.len() != category_templates.nrows() {
            return Err(Error::Shape("template ids do not match template rows".into()));
        }
        if image_templates.ncols() != category_templates.ncols() {
            return Err(Error::Shape("image and category templates differ in width".into()));
        }
        check_rows(&image_templates, "image")?;
        check_rows(&category_templates, "category")?;
        let mut h = Sha256::new();
        h.update(provider_fingerprint.as_bytes());
        for (ids, m) in [(&image_ids, &image_templates), (&category_ids, &category_templates)] {
            h.update((ids.len() as u64).to_le_bytes());
            for id in ids {
                h.update(id.to_le_bytes());
            }
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            image_ids,
            image_templates,
            category_ids,
            category_templates,
            fingerprint: hex::encode(h.finalize()),
        })
    }

    /// Templates from provider outputs for the test catalog.
    pub fn build(test_catalog: &[StimulusRecord], providers: &Providers) -> Result<Self> {
        let emb = CatalogEmbeddings::build(test_catalog, providers)?;
        Self::from_embeddings(&emb, &providers.fingerprint())
    }

    pub fn from_embeddings(emb: &CatalogEmbeddings, provider_fingerprint: &str) -> Result<Self> {
        let mut images: Vec<(i64, usize)> = emb.ids.iter().copied().zip(0..).collect();
        images.sort();
        let mut categories: BTreeMap<i64, usize> = BTreeMap::new();
        for (row, &cat) in emb.category_ids.iter().enumerate() {
            categories.entry(cat).or_insert(row);
        }
        let img_rows: Vec<usize> = images.iter().map(|&(_, r)| r).collect();
        let cat_rows: Vec<usize> = categories.values().copied().collect();
        Self::from_parts(
            images.iter().map(|&(id, _)| id).collect(),
            emb.image.select(ndarray::Axis(0), &img_rows),
            categories.keys().copied().collect(),
            emb.coarse.select(ndarray::Axis(0), &cat_rows),
            provider_fingerprint,
        )
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: i64,
    /// Candidate ids by descending cosine, ties by ascending id.
    pub ranked: Vec<i64>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: i64) -> Option<usize> {
        self.ranked.iter().position(|&c| c == id).map(|p| p + 1)
    }
}

/// Ranks every template for every query by cosine similarity.
pub fn rank_by_cosine(
    queries: ArrayView2<f64>,
    query_ids: &[i64],
    templates: ArrayView2<f64>,
    template_ids: &[i64],
) -> Result<Vec<RetrievalResult>> {
    if queries.ncols() != templates.ncols() {
        return Err(Error::Shape(format!(
            "queries have width {}, templates {}",
            queries.ncols(),
            templates.ncols()
        )));
    }
    if query_ids.len() != queries.nrows() || template_ids.len() != templates.nrows() {
        return Err(Error::Shape("ids do not match rows".into()));
    }
    let q = normalize_rows(queries, "query")?;
    let t = normalize_rows(templates, "template")?;
    let sims = q.dot(&t.t());
    Ok(sims
        .rows()
        .into_iter()
        .zip(query_ids)
        .map(|(row, &qid)| {
            let mut order: Vec<usize> = (0..template_ids.len()).collect();
            order.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
                Ordering::Equal => template_ids[a].cmp(&template_ids[b]),
                o => o,
            });
            RetrievalResult {
                query_id: qid,
                ranked: order.iter().map(|&i| template_ids[i]).collect(),
                scores: order.iter().map(|&i| row[i]).collect(),
            }
        })
        .collect())
}

/// Neural-visual queries against the image templates.
pub fn retrieve(zv_hat: &EmbeddingBatch, bank: &TemplateBank) -> Result<Vec<RetrievalResult>> {
    rank_by_cosine(zv_hat.data.view(), &zv_hat.ids, bank.image_templates.view(), &bank.image_ids)
}

/// Neural-semantic queries against the category templates.
pub fn classify(zs_hat: &EmbeddingBatch, bank: &TemplateBank) -> Result<Vec<RetrievalResult>> {
    rank_by_cosine(zs_hat.data.view(), &zs_hat.ids, bank.category_templates.view(), &bank.category_ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub task: Task,
    pub top1: f64,
    pub top5: f64,
    pub n_queries: usize,
    /// Bank size the ranks refer to.
    pub n_candidates: usize,
    /// 1-based rank of the true id per query.
    pub ranks: Vec<usize>,
    pub query_ids: Vec<i64>,
    pub truth: Vec<i64>,
}

impl TopKReport {
    pub fn accuracy_at(&self, k: usize) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.ranks.iter().filter(|&&r| r <= k).count() as f64 / self.ranks.len() as f64
    }

    /// `k / M` for a bank of `M` candidates.
    pub fn chance(&self, k: usize) -> f64 {
        (k.min(self.n_candidates)) as f64 / self.n_candidates as f64
    }
}

/// Fraction of queries whose true id is within the first `k` ranks, for
/// `k = 1` and `k = 5`, plus the per-query ranks.
pub fn topk_accuracy(results: &[RetrievalResult], truth: &[i64], task: Task) -> Result<TopKReport> {
    if results.len() != truth.len() {
        return Err(Error::Protocol(format!(
            "{} results for {} ground-truth ids",
            results.len(),
            truth.len()
        )));
    }
    let ranks = results
        .iter()
        .zip(truth)
        .map(|(r, &t)| {
            r.rank_of(t).ok_or_else(|| {
                Error::Protocol(format!("true id {t} of query {} is not in the bank", r.query_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = TopKReport {
        task,
        top1: 0.0,
        top5: 0.0,
        n_queries: results.len(),
        n_candidates: results.first().map(|r| r.ranked.len()).unwrap_or(0),
        ranks,
        query_ids: results.iter().map(|r| r.query_id).collect(),
        truth: truth.to_vec(),
    };
    rep.top1 = rep.accuracy_at(1);
    rep.top5 = rep.accuracy_at(5);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_computed_ranking() {
        let t = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let r = rank_by_cosine(array![[0.6, 0.8]].view(), &[9], t.view(), &[1, 2, 3]).unwrap();
        assert_eq!(r[0].ranked, vec![3, 2, 1]);
        assert!((r[0].scores[0] - 1.0).abs() < 1e-12);
        assert!((r[0].scores[1] - 0.8).abs() < 1e-12);
        assert!((r[0].scores[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ties_follow_ascending_id() {
        let t = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let r = rank_by_cosine(array![[0.0, 0.0, 1.0]].view(), &[0], t.view(), &[7, 3]).unwrap();
        assert_eq!(r[0].ranked, vec![3, 7]);
        assert_eq!(r[0].scores, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_query_is_degenerate() {
        let t = array![[1.0, 0.0]];
        assert!(matches!(
            rank_by_cosine(array![[0.0, 0.0]].view(), &[0], t.view(), &[1]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn topk_and_missing_truth() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let r = rank_by_cosine(array![[1.0, 0.1], [1.0, 0.2]].view(), &[0, 1], t.view(), &[10, 11]).unwrap();
        let rep = topk_accuracy(&r, &[10, 11], Task::Retrieval).unwrap();
        assert_eq!(rep.top1, 0.5);
        assert_eq!(rep.accuracy_at(2), 1.0);
        assert!(matches!(topk_accuracy(&r, &[10, 99], Task::Retrieval), Err(Error::Protocol(_))));
    }
}
