//! Object retrieval: which cached images contain a queried concept.
//!
//! An image's score for a query is the maximum inner product over its
//! cached proposals; the image is retrieved when that maximum reaches the
//! query threshold. Retrieved sets are scored per class and macro-averaged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingStore, ImageScores};
use crate::error::{Error, Result};
use crate::synthworld::Corpus;

/// Global retrieval threshold on the cosine between query and proposal.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// Score assigned to images with no cached proposals.
pub const EMPTY_IMAGE_SCORE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub concept: String,
    pub embedding: Vec<f64>,
    pub threshold: f64,
}

impl QuerySpec {
    pub fn new(concept: impl Into<String>, embedding: Vec<f64>, threshold: f64) -> Result<Self> {
        let n = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!("query embedding norm {n} is not 1")));
        }
        if threshold.is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(QuerySpec { concept: concept.into(), embedding, threshold })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub concept: String,
    pub threshold: f64,
    pub images: BTreeSet<String>,
    pub per_image_max: BTreeMap<String, f64>,
}

/// Thresholded max-over-proposals from already computed per-proposal scores.
pub fn retrieve_from_scores(scores: &[ImageScores<'_>], query: &QuerySpec) -> RetrievalResult {
    let mut per_image_max = BTreeMap::new();
    let mut images = BTreeSet::new();
    for s in scores {
        let m = s.scores.iter().copied().fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        let m = m.unwrap_or(EMPTY_IMAGE_SCORE);
        // Empty images are never retrieved, whatever the threshold.
        if !s.scores.is_empty() && m >= query.threshold {
            images.insert(s.image_id.to_string());
        }
        per_image_max.insert(s.image_id.to_string(), m);
    }
    RetrievalResult { concept: query.concept.clone(), threshold: query.threshold, images, per_image_max }
}

pub fn retrieve(store: &EmbeddingStore, query: &QuerySpec) -> Result<RetrievalResult> {
    let scores = store.score_query_par(&query.embedding)?;
    Ok(retrieve_from_scores(&scores, query))
}

/// Precision, recall and F1. Precision and F1 are absent under the federated rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    pub r: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub per_class: BTreeMap<String, Prf>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub federated: bool,
    pub threshold: f64,
}

fn class_prf(pred: &BTreeSet<String>, gt: &BTreeSet<String>) -> (f64, f64, f64) {
    if pred.is_empty() && gt.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let hit = pred.intersection(gt).count() as f64;
    let p = if pred.is_empty() { 0.0 } else { hit / pred.len() as f64 };
    let r = if gt.is_empty() { 0.0 } else { hit / gt.len() as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-class P/R/F1, then an unweighted mean over the evaluated classes.
/// With `federated`, only recall is reported.
pub fn evaluate_retrieval(
    results: &BTreeMap<String, RetrievalResult>,
    gt: &BTreeMap<String, BTreeSet<String>>,
    federated: bool,
) -> Result<RetrievalReport> {
    let mut per_class = BTreeMap::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (concept, res) in results {
        let g = gt
            .get(concept)
            .ok_or_else(|| Error::Config(format!("concept `{concept}` has no ground truth entry")))?;
        let (p, r, f1) = class_prf(&res.images, g);
        sp += p;
        sr += r;
        sf += f1;
        let prf = if federated { Prf { p: None, r, f1: None } } else { Prf { p: Some(p), r, f1: Some(f1) } };
        per_class.insert(concept.clone(), prf);
    }
    let n = results.len().max(1) as f64;
    let macro_avg = if federated {
        Prf { p: None, r: sr / n, f1: None }
    } else {
        Prf { p: Some(sp / n), r: sr / n, f1: Some(sf / n) }
    };
    let threshold = results.values().next().map_or(DEFAULT_THRESHOLD, |r| r.threshold);
    Ok(RetrievalReport { per_class, macro_avg, federated, threshold })
}

/// Retrieves every leaf concept of the corpus at `threshold` and scores the
/// result against the images that contain it.
pub fn evaluate_leaf_retrieval(
    corpus: &Corpus,
    store: &EmbeddingStore,
    threshold: f64,
    federated: bool,
) -> Result<RetrievalReport> {
    let mut results = BTreeMap::new();
    for leaf in corpus.leaf_ids() {
        let e = corpus.embedder.embed(&leaf)?.to_vec();
        results.insert(leaf.clone(), retrieve(store, &QuerySpec::new(leaf, e, threshold)?)?);
    }
    let gt = corpus.images_by_leaf().into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect();
    evaluate_retrieval(&results, &gt, federated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn result(concept: &str, images: &[&str]) -> RetrievalResult {
        RetrievalResult {
            concept: concept.into(),
            threshold: 0.2,
            images: set(images),
            per_image_max: BTreeMap::new(),
        }
    }

    #[test]
    fn threshold_over_image_maxima() {
        let q = QuerySpec::new("cat", vec![1.0, 0.0], 0.2).unwrap();
        let scores = vec![
            ImageScores { image_id: "1", scores: vec![0.1, 0.8] },
            ImageScores { image_id: "2", scores: vec![0.3] },
            ImageScores { image_id: "3", scores: vec![0.25, -0.4] },
            ImageScores { image_id: "4", scores: vec![] },
        ];
        let r = retrieve_from_scores(&scores, &q);
        assert_eq!(r.images, set(&["1", "2", "3"]));
        assert_eq!(r.per_image_max["1"], 0.8);
        assert_eq!(r.per_image_max["4"], EMPTY_IMAGE_SCORE);
        let all = retrieve_from_scores(&scores, &QuerySpec { threshold: -1.0, ..q.clone() });
        assert_eq!(all.images, set(&["1", "2", "3"]));
        let none = retrieve_from_scores(&scores, &QuerySpec { threshold: 1.01, ..q });
        assert!(none.images.is_empty());
    }

    #[test]
    fn non_unit_query_rejected() {
        assert!(QuerySpec::new("x", vec![2.0, 0.0], 0.2).is_err());
    }

    #[test]
    fn per_class_definitions() {
        let mut results = BTreeMap::new();
        results.insert("cat".to_string(), result("cat", &["1", "2", "3"]));
        let mut gt = BTreeMap::new();
        gt.insert("cat".to_string(), set(&["1"]));
        let r = evaluate_retrieval(&results, &gt, false).unwrap();
        let c = r.per_class["cat"];
        assert!((c.p.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.r, 1.0);
        assert!((c.f1.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_conventions() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result("a", &[]));
        results.insert("b".to_string(), result("b", &[]));
        let mut gt = BTreeMap::new();
        gt.insert("a".to_string(), set(&["1"]));
        gt.insert("b".to_string(), set(&[]));
        let r = evaluate_retrieval(&results, &gt, false).unwrap();
        assert_eq!(r.per_class["a"], Prf { p: Some(0.0), r: 0.0, f1: Some(0.0) });
        assert_eq!(r.per_class["b"], Prf { p: Some(1.0), r: 1.0, f1: Some(1.0) });
    }

    #[test]
    fn macro_is_arithmetic_mean() {
        let mut results = BTreeMap::new();
        let mut gt = BTreeMap::new();
        // F1 0.4: P = 0.25, R = 1
        results.insert("a".to_string(), result("a", &["1", "2", "3", "4"]));
        gt.insert("a".to_string(), set(&["1"]));
        // F1 0.8: P = 2/3, R = 1
        results.insert("b".to_string(), result("b", &["1", "2", "3"]));
        gt.insert("b".to_string(), set(&["1", "2"]));
        let r = evaluate_retrieval(&results, &gt, false).unwrap();
        assert!((r.per_class["a"].f1.unwrap() - 0.4).abs() < 1e-12);
        assert!((r.per_class["b"].f1.unwrap() - 0.8).abs() < 1e-12);
        assert!((r.macro_avg.f1.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn federated_report_has_recall_only() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result("a", &["1"]));
        let mut gt = BTreeMap::new();
        gt.insert("a".to_string(), set(&["1", "2"]));
        let r = evaluate_retrieval(&results, &gt, true).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["macro"], serde_json::json!({"r": 0.5}));
        assert_eq!(json["per_class"]["a"], serde_json::json!({"r": 0.5}));
        assert_eq!(json["federated"], serde_json::json!(true));
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let mut results = BTreeMap::new();
        results.insert("a".to_string(), result("a", &["1"]));
        assert!(evaluate_retrieval(&results, &BTreeMap::new(), false).is_err());
    }
}
