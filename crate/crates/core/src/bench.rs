//! Cost of answering a concept query from the cache versus re-extracting
//! region embeddings from the feature grids for every query.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingStore, ImageCacheRecord};
use crate::error::{Error, Result};
use crate::geometry::pool_region_embedding_into;
use crate::synthworld::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_queries: usize,
    /// Total proposal counts of the scaled stores.
    pub sizes: Vec<usize>,
    /// Also time the re-extraction baseline at every size.
    pub baseline: bool,
    /// Repeat the cached measurement until at least this many seconds elapsed.
    pub min_seconds: f64,
}

impl BenchConfig {
    pub fn new(n_queries: usize) -> Self {
        BenchConfig { n_queries, sizes: vec![1_000, 10_000, 100_000], baseline: true, min_seconds: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_proposals: usize,
    pub cached_seconds_per_query: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_seconds_per_query: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ratio: Option<f64>,
}

/// Least-squares line `seconds = slope * n + intercept` and its R².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_queries: usize,
    pub dim: usize,
    pub rows: Vec<BenchRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cached_fit: Option<LinearFit>,
    /// Feature-grid cell reads performed while timing the cached path.
    pub cached_grid_reads: u64,
    pub baseline_grid_reads: u64,
}

/// A store of exactly `n` proposals made by cycling through `base` records
/// under fresh ids. Returns, per record, the index of its source record.
pub fn scaled_store(base: &EmbeddingStore, n: usize) -> Result<(EmbeddingStore, Vec<usize>)> {
    let src: Vec<(usize, &ImageCacheRecord)> =
        base.records().iter().enumerate().filter(|(_, r)| !r.is_empty()).collect();
    if src.is_empty() && n > 0 {
        return Err(Error::Config("cannot scale a store without proposals".into()));
    }
    let mut records = Vec::new();
    let mut origin = Vec::new();
    let mut total = 0;
    let mut k = 0;
    while total < n {
        let (i, r) = src[k % src.len()];
        let take = r.len().min(n - total);
        records.push(r.truncated(take).renamed(format!("{}#{}", r.image_id(), k / src.len())));
        origin.push(i);
        total += take;
        k += 1;
    }
    Ok((EmbeddingStore::new(base.dim(), records)?, origin))
}

fn grid_reads(corpus: &Corpus) -> u64 {
    corpus.scenes.iter().flat_map(|s| &s.grids).map(|g| g.read_count()).sum()
}

/// Per-query scores computed the expensive way: pool every proposal's
/// region embedding from its scene's grids, normalize, then take the dot.
pub fn reextract_scores(
    corpus: &Corpus,
    store: &EmbeddingStore,
    origin: &[usize],
    base: &EmbeddingStore,
    query: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut e = vec![0.0; store.dim()];
    let mut out = Vec::with_capacity(store.records().len());
    for (r, &o) in store.records().iter().zip(origin) {
        let id = base.records()[o].image_id();
        let scene = corpus
            .scene(id)
            .ok_or_else(|| Error::Validation { image_id: id.to_string(), msg: "image missing from the corpus".into() })?;
        let mut s = Vec::with_capacity(r.len());
        for b in r.boxes() {
            pool_region_embedding_into(&scene.grids, &b.cast(), &mut e)?;
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.push(e.iter().zip(query).map(|(a, q)| a * q).sum::<f64>() / n);
        }
        out.push(s);
    }
    Ok(out)
}

fn leaf_queries(corpus: &Corpus, n: usize) -> Result<Vec<Vec<f64>>> {
    let leaves = corpus.leaf_ids();
    (0..n).map(|i| Ok(corpus.embedder.embed(&leaves[i % leaves.len()])?.to_vec())).collect()
}

/// Times cached scoring and the re-extraction baseline on stores scaled to
/// each configured size. Queries are the corpus leaf concepts, cycled.
pub fn run_bench(corpus: &Corpus, base: &EmbeddingStore, cfg: &BenchConfig) -> Result<BenchReport> {
    if corpus.dim() != base.dim() {
        return Err(Error::DimMismatch { expected: corpus.dim(), got: base.dim() });
    }
    let queries = leaf_queries(corpus, cfg.n_queries)?;
    let mut rows = Vec::new();
    let (mut cached_reads, mut baseline_reads) = (0, 0);
    if queries.is_empty() {
        return Ok(BenchReport { n_queries: 0, dim: base.dim(), rows, cached_fit: None, cached_grid_reads: 0, baseline_grid_reads: 0 });
    }
    for &n in &cfg.sizes {
        let (store, origin) = scaled_store(base, n)?;
        let before = grid_reads(corpus);
        let start = Instant::now();
        let mut passes = 0usize;
        let mut sink = 0.0;
        loop {
            for q in &queries {
                for s in store.score_query(q)? {
                    sink += s.scores.first().copied().unwrap_or(0.0);
                }
            }
            passes += 1;
            if start.elapsed().as_secs_f64() >= cfg.min_seconds {
                break;
            }
        }
        let cached = start.elapsed().as_secs_f64() / (passes * queries.len()) as f64;
        cached_reads += grid_reads(corpus) - before;
        std::hint::black_box(sink);

        let (baseline, ratio) = if cfg.baseline {
            let before = grid_reads(corpus);
            let start = Instant::now();
            for q in &queries {
                std::hint::black_box(reextract_scores(corpus, &store, &origin, base, q)?);
            }
            let t = start.elapsed().as_secs_f64() / queries.len() as f64;
            baseline_reads += grid_reads(corpus) - before;
            (Some(t), Some(t / cached))
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            n_proposals: store.total_proposals(),
            cached_seconds_per_query: cached,
            baseline_seconds_per_query: baseline,
            ratio,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n_proposals as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.cached_seconds_per_query).collect();
    Ok(BenchReport {
        n_queries: queries.len(),
        dim: base.dim(),
        rows,
        cached_fit: linear_fit(&x, &y),
        cached_grid_reads: cached_reads,
        baseline_grid_reads: baseline_reads,
    })
}
