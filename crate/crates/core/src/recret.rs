//! Referring expressions as retrieval over a candidate list.
//!
//! Cached proposals of an image (plus, during training, any ground truth they
//! miss) form a candidate list. Each candidate becomes one feature token: its
//! pooled region embedding with a sinusoidal box encoding added. A scorer maps
//! (query, candidates) to one sigmoid score per candidate in a single call, so
//! localizing an expression is classification over the list.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingStore, ImageCacheRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, pool_region_embedding, rank_order, Scored};
use crate::probe::{sigmoid, soft_focal_loss_logit, soft_labels};
use crate::rng;
use crate::synthworld::{sample_label, ConceptEmbedder, Corpus, LabelPolicy, SceneRecord, RELATIONS};
use crate::{BBox, Grid, ScoredBox};

pub const DEFAULT_INJECT_IOU: f64 = 0.5;
pub const DEFAULT_HARD_NEGATIVES: usize = 3;

/// Norm of the box encoding added to each unit-norm candidate feature.
pub const POSITION_AMPLITUDE: f64 = 0.1;

/// Per-candidate scalar inputs after the two embeddings: dot with the query,
/// normalized (cx, cy, w, h), IoU with the best-matching referent blob, and
/// two flags that are 1 when the query text names `leftmost` (`rightmost`)
/// and that blob is not the leftmost (rightmost) one.
pub const SCALAR_FEATURES: usize = 8;

/// A context cell is query-relevant when its relevance reaches this fraction of the best cell.
const RELEVANT_FRACTION: f64 = 0.5;
/// Below this best relevance the image is treated as containing no referent.
const RELEVANCE_FLOOR: f64 = 0.05;

/// Sinusoidal encoding of a normalized box, `dim / 4` components per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPositionEncoding {
    dim: usize,
    extent: (f64, f64),
    /// Angular frequencies; each contributes a sine and a cosine per coordinate.
    bands: Vec<f64>,
}

impl BoxPositionEncoding {
    pub fn new(dim: usize, extent: (f64, f64)) -> Self {
        let n = dim / 4 / 2;
        let bands = (0..n).map(|k| std::f64::consts::PI * 2f64.powi(k as i32)).collect();
        BoxPositionEncoding { dim, extent, bands }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(cx, cy, w, h)` divided by the image extent.
    pub fn normalized(&self, b: &BBox) -> [f64; 4] {
        let (w, h) = self.extent;
        let (cx, cy) = b.center();
        [cx / w, cy / h, b.width() / w, b.height() / h]
    }

    /// Encoding of `b` with norm [`POSITION_AMPLITUDE`] (zero when `dim < 8`).
    pub fn encode(&self, b: &BBox) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if self.bands.is_empty() {
            return out;
        }
        let per = self.dim / 4;
        // Every (sin, cos) pair has unit norm, so the raw norm is sqrt(4 * bands).
        let s = POSITION_AMPLITUDE / ((4 * self.bands.len()) as f64).sqrt();
        for (c, v) in self.normalized(b).into_iter().enumerate() {
            for (k, w) in self.bands.iter().enumerate() {
                out[c * per + 2 * k] = s * (w * v).sin();
                out[c * per + 2 * k + 1] = s * (w * v).cos();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub image_id: String,
    pub extent: (f64, f64),
    /// Image tokens: the finest feature grid of the scene.
    pub context: Grid,
    pub boxes: Vec<BBox>,
    /// One feature token per candidate, `dim` values each.
    pub object_features: Vec<Vec<f64>>,
    pub injected_flags: Vec<bool>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn injected(&self) -> usize {
        self.injected_flags.iter().filter(|&&f| f).count()
    }

    /// Reorders every column by `perm` (candidate `i` of the result is `perm[i]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        CandidateList {
            image_id: self.image_id.clone(),
            extent: self.extent,
            context: self.context.clone(),
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
            object_features: perm.iter().map(|&i| self.object_features[i].clone()).collect(),
            injected_flags: perm.iter().map(|&i| self.injected_flags[i]).collect(),
        }
    }
}

fn candidate_feature(scene: &SceneRecord, pe: &BoxPositionEncoding, b: &BBox) -> Result<Vec<f64>> {
    let mut f = pool_region_embedding(&scene.grids, b)?;
    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::InvalidRegion(format!("candidate {b:?} pools to a zero vector")));
    }
    let p = pe.encode(b);
    f.iter_mut().zip(&p).for_each(|(x, e)| *x = *x / n + e);
    Ok(f)
}

/// Cached boxes of the image, then every ground truth that no cached box
/// covers at `inject_iou`.
pub fn assemble_candidates(
    scene: &SceneRecord,
    cached: &ImageCacheRecord,
    gts: &[BBox],
    inject_iou: f64,
) -> Result<CandidateList> {
    if scene.image_id != cached.image_id() {
        return Err(Error::Validation {
            image_id: scene.image_id.clone(),
            msg: format!("cache record belongs to `{}`", cached.image_id()),
        });
    }
    let finest = scene.grids.iter().min_by(|a, b| a.stride().total_cmp(&b.stride())).ok_or_else(|| {
        Error::Validation { image_id: scene.image_id.clone(), msg: "scene carries no feature grids".into() }
    })?;
    let pe = BoxPositionEncoding::new(finest.dim(), scene.extent);
    let mut boxes: Vec<BBox> = cached.boxes().iter().map(|b| b.cast()).collect();
    let mut flags = vec![false; boxes.len()];
    let n_cached = boxes.len();
    for g in gts {
        let best = boxes[..n_cached].iter().map(|b| iou(b, g)).fold(0.0, f64::max);
        if best < inject_iou {
            boxes.push(*g);
            flags.push(true);
        }
    }
    let object_features = boxes.iter().map(|b| candidate_feature(scene, &pe, b)).collect::<Result<_>>()?;
    Ok(CandidateList {
        image_id: scene.image_id.clone(),
        extent: scene.extent,
        context: finest.clone(),
        boxes,
        object_features,
        injected_flags: flags,
    })
}

/// Checks that every ground truth has a candidate at `iou_thresh` or more.
pub fn check_injection(cands: &CandidateList, gts: &[BBox], iou_thresh: f64) -> Result<()> {
    for (k, g) in gts.iter().enumerate() {
        if !cands.boxes.iter().any(|b| iou(b, g) >= iou_thresh) {
            return Err(Error::Validation {
                image_id: cands.image_id.clone(),
                msg: format!("ground truth {k} has no candidate at IoU >= {iou_thresh}"),
            });
        }
    }
    Ok(())
}

/// The `m` absent classes the cache is most confident about. Confidence is
/// the best inner product over the image's cached proposals; ties go to the
/// lexicographically smaller name. Returns fewer than `m` when fewer are absent.
pub fn mine_hard_negatives(
    cached: &ImageCacheRecord,
    class_embeddings: &BTreeMap<String, Vec<f64>>,
    present: &BTreeSet<String>,
    m: usize,
) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = class_embeddings
        .iter()
        .filter(|(c, _)| !present.contains(*c))
        .map(|(c, e)| (cached.scores(e).into_iter().fold(f64::NEG_INFINITY, f64::max), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(m).map(|(_, c)| c.clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecQuery {
    pub text: String,
    pub embedding: Vec<f64>,
}

impl RecQuery {
    pub fn new(text: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("query embedding is not finite".into()));
        }
        Ok(RecQuery { text: text.into(), embedding })
    }

    /// Unit-normalized sum of the term embeddings.
    pub fn compose(embedder: &ConceptEmbedder, terms: &[String]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("query has no terms".into()));
        }
        let mut e = embedder.compose(terms)?;
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            e.iter_mut().for_each(|x| *x /= n);
        }
        RecQuery::new(query_text(terms), e)
    }
}

/// Human-readable form of a term list, e.g. `leftmost red car`.
pub fn query_text(terms: &[String]) -> String {
    terms.iter().map(|t| t.replace('_', " ")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bounding boxes of the 4-connected regions of context cells relevant to
/// `query`, ordered by their top-left cell. Empty when nothing in the image
/// reaches the relevance floor.
pub fn referent_blobs(query: &[f64], context: &Grid) -> Vec<BBox> {
    let (h, w) = (context.height(), context.width());
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 || h * w == 0 {
        return Vec::new();
    }
    let rel: Vec<f64> = context.values().chunks_exact(context.dim()).map(|c| dot(c, query) / qn).collect();
    let best = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best < RELEVANCE_FLOOR {
        return Vec::new();
    }
    let on: Vec<bool> = rel.iter().map(|&r| r >= RELEVANT_FRACTION * best).collect();
    let mut seen = vec![false; h * w];
    let s = context.stride();
    let mut blobs = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(c) = stack.pop() {
            let (i, j) = (c / w, c % w);
            (i0, j0, i1, j1) = (i0.min(i), j0.min(j), i1.max(i), j1.max(j));
            let mut visit = |n: usize| {
                if on[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(c - w);
            }
            if i + 1 < h {
                visit(c + w);
            }
            if j > 0 {
                visit(c - 1);
            }
            if j + 1 < w {
                visit(c + 1);
            }
        }
        blobs.push(BBox {
            x1: j0 as f64 * s,
            y1: i0 as f64 * s,
            x2: (j1 + 1) as f64 * s,
            y2: (i1 + 1) as f64 * s,
        });
    }
    blobs
}

/// Scalar inputs of every candidate for one query. The context part comes
/// from the image tokens only, so it is the same whatever the candidate order.
pub fn scalar_features(query: &RecQuery, cands: &CandidateList) -> Vec<[f64; SCALAR_FEATURES]> {
    let names = |rel: &str| query.text.split_whitespace().any(|w| w == rel);
    let q = &query.embedding;
    let blobs = referent_blobs(q, &cands.context);
    let (w, _) = cands.extent;
    let centres: Vec<f64> = blobs.iter().map(|b| b.center().0 / w).collect();
    let flag = |b: bool| f64::from(u8::from(b));
    let (gate_l, gate_r) = (flag(names(RELATIONS[0])), flag(names(RELATIONS[1])));
    let left = centres.iter().copied().fold(f64::INFINITY, f64::min);
    let right = centres.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pe = BoxPositionEncoding::new(0, cands.extent);
    cands
        .boxes
        .iter()
        .zip(&cands.object_features)
        .map(|(b, o)| {
            let g = pe.normalized(b);
            let best = blobs
                .iter()
                .enumerate()
                .map(|(k, blob)| (iou(b, blob), k))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            let (overlap, dl, dr) = match best {
                Some((v, k)) if v > 0.0 => (v, flag(centres[k] > left), flag(centres[k] < right)),
                _ => (0.0, 0.0, 0.0),
            };
            [dot(o, q), g[0], g[1], g[2], g[3], overlap, gate_l * dl, gate_r * dr]
        })
        .collect()
}

/// Two-layer tanh network over `[feature | query | scalars]`, one logit per candidate.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "ScorerFile", into = "ScorerFile")]
pub struct ToyScorer {
    dim: usize,
    hidden: usize,
    /// `hidden` rows of `2 * dim + SCALAR_FEATURES` weights.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    pub seed: u64,
    pub trained_epochs: usize,
    invocations: AtomicU64,
}

impl Clone for ToyScorer {
    fn clone(&self) -> Self {
        ToyScorer {
            dim: self.dim,
            hidden: self.hidden,
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
            seed: self.seed,
            trained_epochs: self.trained_epochs,
            invocations: AtomicU64::new(self.invocations()),
        }
    }
}

impl PartialEq for ToyScorer {
    fn eq(&self, o: &Self) -> bool {
        self.params() == o.params() && self.dim == o.dim && self.hidden == o.hidden && self.seed == o.seed
    }
}

#[derive(Serialize, Deserialize)]
struct ScorerFile {
    dim: usize,
    hidden: usize,
    scalar_features: usize,
    seed: u64,
    trained_epochs: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl From<ToyScorer> for ScorerFile {
    fn from(s: ToyScorer) -> Self {
        ScorerFile {
            dim: s.dim,
            hidden: s.hidden,
            scalar_features: SCALAR_FEATURES,
            seed: s.seed,
            trained_epochs: s.trained_epochs,
            w1: s.w1,
            b1: s.b1,
            w2: s.w2,
            b2: s.b2,
        }
    }
}

impl TryFrom<ScorerFile> for ToyScorer {
    type Error = Error;

    fn try_from(f: ScorerFile) -> Result<Self> {
        if f.scalar_features != SCALAR_FEATURES {
            return Err(Error::Config(format!(
                "scorer expects {} scalar features, this build uses {SCALAR_FEATURES}",
                f.scalar_features
            )));
        }
        let s = ToyScorer {
            dim: f.dim,
            hidden: f.hidden,
            w1: f.w1,
            b1: f.b1,
            w2: f.w2,
            b2: f.b2,
            seed: f.seed,
            trained_epochs: f.trained_epochs,
            invocations: AtomicU64::new(0),
        };
        s.validate()?;
        Ok(s)
    }
}

impl ToyScorer {
    pub fn input_dim(dim: usize) -> usize {
        2 * dim + SCALAR_FEATURES
    }

    /// Seeded initialization: Gaussian weights scaled by fan-in, zero hidden bias.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "rec-scorer/init");
        let fan_in = Self::input_dim(dim);
        let mut gauss = |s: f64| -> f64 {
            let g: f64 = StandardNormal.sample(&mut r);
            g * s
        };
        let w1 = (0..hidden * fan_in).map(|_| gauss(1.0 / (fan_in as f64).sqrt())).collect();
        let w2 = (0..hidden).map(|_| gauss(1.0 / (hidden as f64).sqrt())).collect();
        ToyScorer {
            dim,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: -2.0,
            seed,
            trained_epochs: 0,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fan_in = Self::input_dim(self.dim);
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("scorer dim and hidden size must be positive".into()));
        }
        if self.w1.len() != self.hidden * fan_in || self.b1.len() != self.hidden || self.w2.len() != self.hidden {
            return Err(Error::Config("scorer parameter shapes do not match dim/hidden".into()));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("scorer parameters are not finite".into()));
        }
        Ok(())
    }

    /// Flat parameter vector: `w1`, `b1`, `w2`, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.hidden + 1);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let n1 = self.w1.len();
        let h = self.hidden;
        if params.len() != n1 + 2 * h + 1 {
            return Err(Error::DimMismatch { expected: n1 + 2 * h + 1, got: params.len() });
        }
        let s = ToyScorer {
            w1: params[..n1].to_vec(),
            b1: params[n1..n1 + h].to_vec(),
            w2: params[n1 + h..n1 + 2 * h].to_vec(),
            b2: params[n1 + 2 * h],
            invocations: AtomicU64::new(0),
            ..self.clone()
        };
        s.validate()?;
        Ok(s)
    }

    /// Number of [`score_candidates`] calls served so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Embedding inputs enter the network multiplied by `sqrt(dim)`, which gives
/// unit-norm vectors components of roughly unit variance.
fn scaled(v: &[f64]) -> Vec<f64> {
    let s = (v.len() as f64).sqrt();
    v.iter().map(|x| x * s).collect()
}

/// Logits of all rows of one query, given the query part of the first layer.
fn forward_logits(
    p: &[f64],
    dim: usize,
    hidden: usize,
    q_pre: &[f64],
    feats: &[Vec<f64>],
    scalars: &[[f64; SCALAR_FEATURES]],
) -> Vec<f64> {
    let fan_in = 2 * dim + SCALAR_FEATURES;
    let w2 = &p[hidden * fan_in + hidden..hidden * fan_in + 2 * hidden];
    let b2 = p[hidden * fan_in + 2 * hidden];
    feats
        .iter()
        .zip(scalars)
        .map(|(o, s)| {
            let mut z = b2;
            for h in 0..hidden {
                let row = &p[h * fan_in..(h + 1) * fan_in];
                let a = q_pre[h] + dot(&row[..dim], o) + dot(&row[2 * dim..], s);
                z += w2[h] * a.tanh();
            }
            z
        })
        .collect()
}

/// Query half of the first layer plus its bias, shared by every candidate.
fn query_preactivation(p: &[f64], dim: usize, hidden: usize, q: &[f64]) -> Vec<f64> {
    let fan_in = 2 * dim + SCALAR_FEATURES;
    let b1 = &p[hidden * fan_in..hidden * fan_in + hidden];
    (0..hidden).map(|h| b1[h] + dot(&p[h * fan_in + dim..h * fan_in + 2 * dim], q)).collect()
}

/// Scores every candidate for `query` in one call.
pub fn score_candidates(scorer: &ToyScorer, query: &RecQuery, cands: &CandidateList) -> Result<ScoreVector> {
    let dim = scorer.dim;
    if query.embedding.len() != dim {
        return Err(Error::DimMismatch { expected: dim, got: query.embedding.len() });
    }
    if let Some(f) = cands.object_features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimMismatch { expected: dim, got: f.len() });
    }
    scorer.invocations.fetch_add(1, Ordering::Relaxed);
    let p = scorer.params();
    let q_pre = query_preactivation(&p, dim, scorer.hidden, &scaled(&query.embedding));
    let scalars = scalar_features(query, cands);
    let feats: Vec<Vec<f64>> = cands.object_features.iter().map(|o| scaled(o)).collect();
    let logits = forward_logits(&p, dim, scorer.hidden, &q_pre, &feats, &scalars);
    Ok(ScoreVector { scores: logits.into_iter().map(sigmoid).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Top1,
    Threshold(f64),
}

/// Candidates in descending score order, ties to the earlier candidate.
fn ranked(scores: &ScoreVector) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.scores.len()).collect();
    idx.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    idx
}

pub fn decode_rec(scores: &ScoreVector, cands: &CandidateList, mode: DecodeMode) -> Result<Vec<ScoredBox>> {
    if scores.scores.len() != cands.len() {
        return Err(Error::DimMismatch { expected: cands.len(), got: scores.scores.len() });
    }
    let order = ranked(scores);
    let pick = |i: usize| Scored::new(cands.boxes[i], scores.scores[i]);
    Ok(match mode {
        DecodeMode::Top1 => order.first().map(|&i| pick(i)).into_iter().collect(),
        DecodeMode::Threshold(t) => order.into_iter().filter(|&i| scores.scores[i] >= t).map(pick).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedBox {
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Class-tagged union of per-query detections, classes in name order, each
/// class ranked (and suppressed when `nms_iou` is given).
pub fn merge_multiquery(per_query: &BTreeMap<String, Vec<ScoredBox>>, nms_iou: Option<f64>) -> Vec<TaggedBox> {
    let mut out = Vec::new();
    for (class, dets) in per_query {
        let kept = match nms_iou {
            Some(t) => nms(dets, t),
            None => {
                let mut d = dets.clone();
                d.sort_by(rank_order);
                d
            }
        };
        out.extend(kept.into_iter().map(|d| TaggedBox { class: class.clone(), bbox: d.bbox, score: d.score }));
    }
    out
}

/// One referring-expression task; empty `gt_boxes` marks a negative query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecTask {
    pub image_id: String,
    pub query_text: String,
    pub query_terms: Vec<String>,
    pub gt_boxes: Vec<BBox>,
}

impl RecTask {
    pub fn is_negative(&self) -> bool {
        self.gt_boxes.is_empty()
    }
}

pub fn save_tasks(tasks: &[RecTask], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<RecTask>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: RecTask = serde_json::from_str(&line).map_err(|e| Error::Parse { line: k + 1, msg: e.to_string() })?;
        for b in &t.gt_boxes {
            b.validate().map_err(|e| Error::Parse { line: k + 1, msg: e.to_string() })?;
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    /// Stop after this many tasks in total.
    pub n_tasks: usize,
    pub policy: LabelPolicy,
    /// Negative tasks per image, each drawn from the mined hard negatives.
    pub negatives_per_image: usize,
    pub hard_negatives: usize,
    pub seed: u64,
}

impl TaskGenConfig {
    pub fn new(n_tasks: usize, seed: u64) -> Self {
        TaskGenConfig {
            n_tasks,
            policy: LabelPolicy::LastTwo,
            negatives_per_image: 1,
            hard_negatives: DEFAULT_HARD_NEGATIVES,
            seed,
        }
    }
}

/// Every concept embedding of the corpus taxonomy, keyed by id.
pub fn class_embeddings(corpus: &Corpus) -> Result<BTreeMap<String, Vec<f64>>> {
    corpus
        .config
        .taxonomy
        .nodes()
        .iter()
        .map(|n| Ok((n.id.clone(), corpus.embedder.embed(&n.id)?.to_vec())))
        .collect()
}

/// Positive task for one scene: a label drawn from a random object's path by
/// `policy`; when several objects carry that label, a relation term picks the
/// leftmost or rightmost by box centre. `None` if the relation is ambiguous.
fn positive_task(scene: &SceneRecord, policy: LabelPolicy, r: &mut rng::Rng) -> Option<RecTask> {
    if scene.objects.is_empty() {
        return None;
    }
    let obj = &scene.objects[r.gen_range(0..scene.objects.len())];
    let label = sample_label(obj, policy, r).to_string();
    let referents: Vec<&BBox> =
        scene.objects.iter().filter(|o| o.label_path.contains(&label)).map(|o| &o.bbox).collect();
    let mut terms = vec![label];
    let gt = if referents.len() == 1 {
        *referents[0]
    } else {
        let rel = RELATIONS[r.gen_range(0..RELATIONS.len())];
        let key = |b: &&BBox| if rel == RELATIONS[0] { b.center().0 } else { -b.center().0 };
        let best = referents.iter().map(key).fold(f64::INFINITY, f64::min);
        let winners: Vec<&&BBox> = referents.iter().filter(|b| key(b) == best).collect();
        if winners.len() != 1 {
            return None;
        }
        terms.insert(0, rel.to_string());
        **winners[0]
    };
    Some(RecTask { image_id: scene.image_id.clone(), query_text: query_text(&terms), query_terms: terms, gt_boxes: vec![gt] })
}

/// Synthetic REC tasks over `scenes`, cycling through them in order until
/// `n_tasks` are produced. Each visit adds one positive task and
/// `negatives_per_image` negative tasks whose concept is drawn from the
/// image's mined hard negatives.
pub fn generate_rec_tasks(
    corpus: &Corpus,
    store: &EmbeddingStore,
    scenes: &[SceneRecord],
    cfg: &TaskGenConfig,
) -> Result<Vec<RecTask>> {
    if cfg.n_tasks > 0 && scenes.iter().all(|s| s.objects.is_empty()) {
        return Err(Error::Config("no scene has objects to refer to".into()));
    }
    let classes = class_embeddings(corpus)?;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut visit = 0usize;
    while tasks.len() < cfg.n_tasks {
        let scene = &scenes[visit % scenes.len()];
        let mut r = rng::stream(cfg.seed, &format!("rec-task/{}/{}", scene.image_id, visit / scenes.len()));
        visit += 1;
        if let Some(t) = positive_task(scene, cfg.policy, &mut r) {
            tasks.push(t);
        }
        if cfg.negatives_per_image == 0 {
            continue;
        }
        let cached = store.get(&scene.image_id).ok_or_else(|| Error::Validation {
            image_id: scene.image_id.clone(),
            msg: "image missing from the cache".into(),
        })?;
        let present: BTreeSet<String> = scene.objects.iter().flat_map(|o| o.label_path.iter().cloned()).collect();
        let mined = mine_hard_negatives(cached, &classes, &present, cfg.hard_negatives);
        for _ in 0..cfg.negatives_per_image {
            if mined.is_empty() || tasks.len() >= cfg.n_tasks {
                break;
            }
            let c = mined[r.gen_range(0..mined.len())].clone();
            tasks.push(RecTask {
                image_id: scene.image_id.clone(),
                query_text: query_text(std::slice::from_ref(&c)),
                query_terms: vec![c],
                gt_boxes: vec![],
            });
        }
        if visit > 100 * cfg.n_tasks.max(scenes.len()) {
            return Err(Error::Config("task generation makes no progress".into()));
        }
    }
    tasks.truncate(cfg.n_tasks);
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub inject_iou: f64,
    pub seed: u64,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        RecTrainConfig { hidden: 16, lr: 1.0, momentum: 0.9, epochs: 300, gamma: 2.0, inject_iou: DEFAULT_INJECT_IOU, seed: 0 }
    }
}

impl RecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.inject_iou > 0.0 && self.inject_iou <= 1.0) {
            return bad("inject_iou must be in (0, 1]");
        }
        Ok(())
    }
}

/// One task prepared for training: network inputs and per-candidate targets.
/// `query` and `features` are already scaled by `sqrt(dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecExample {
    pub query: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub scalars: Vec<[f64; SCALAR_FEATURES]>,
    pub labels: Vec<f64>,
}

impl RecExample {
    pub fn new(query: &RecQuery, cands: &CandidateList, gts: &[BBox]) -> Self {
        RecExample {
            query: scaled(&query.embedding),
            features: cands.object_features.iter().map(|o| scaled(o)).collect(),
            scalars: scalar_features(query, cands),
            labels: soft_labels(&cands.boxes, gts),
        }
    }
}

/// Mean soft focal loss over all (task, candidate) pairs and its gradient in
/// the flat parameters of a scorer with the given shape.
pub fn rec_objective(params: &[f64], dim: usize, hidden: usize, data: &[RecExample], gamma: f64) -> (f64, Vec<f64>) {
    let fan_in = 2 * dim + SCALAR_FEATURES;
    let n1 = hidden * fan_in;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut rows = 0usize;
    let w2 = &params[n1 + hidden..n1 + 2 * hidden];
    let b2 = params[n1 + 2 * hidden];
    let mut z = vec![0.0; hidden];
    let mut delta = vec![0.0; hidden];
    for ex in data {
        let q_pre = query_preactivation(params, dim, hidden, &ex.query);
        let mut delta_sum = vec![0.0; hidden];
        for ((o, s), &y) in ex.features.iter().zip(&ex.scalars).zip(&ex.labels) {
            let mut logit = b2;
            for h in 0..hidden {
                let row = &params[h * fan_in..(h + 1) * fan_in];
                z[h] = (q_pre[h] + dot(&row[..dim], o) + dot(&row[2 * dim..], s)).tanh();
                logit += w2[h] * z[h];
            }
            let (l, g) = soft_focal_loss_logit(logit, y, gamma);
            loss += l;
            rows += 1;
            for h in 0..hidden {
                grad[n1 + hidden + h] += g * z[h];
                delta[h] = g * w2[h] * (1.0 - z[h] * z[h]);
                delta_sum[h] += delta[h];
            }
            grad[n1 + 2 * hidden] += g;
            for h in 0..hidden {
                let d = delta[h];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[h * fan_in..(h + 1) * fan_in];
                row[..dim].iter_mut().zip(o).for_each(|(a, x)| *a += d * x);
                row[2 * dim..].iter_mut().zip(s).for_each(|(a, x)| *a += d * x);
            }
        }
        for h in 0..hidden {
            let d = delta_sum[h];
            grad[n1 + h] += d;
            grad[h * fan_in + dim..h * fan_in + 2 * dim].iter_mut().zip(&ex.query).for_each(|(a, x)| *a += d * x);
        }
    }
    let n = rows.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecTraining {
    pub scorer: ToyScorer,
    /// Mean loss at the start of each epoch, followed by the final loss.
    pub losses: Vec<f64>,
    /// Ground truths checked for a covering candidate, and how many were injected.
    pub gts_checked: usize,
    pub injected: usize,
}

fn scene_and_record<'a>(
    corpus: &'a Corpus,
    store: &'a EmbeddingStore,
    image_id: &str,
) -> Result<(&'a SceneRecord, &'a ImageCacheRecord)> {
    let missing = |what: &str| Error::Validation { image_id: image_id.to_string(), msg: format!("image missing from the {what}") };
    let scene = corpus.scene(image_id).ok_or_else(|| missing("corpus"))?;
    let rec = store.get(image_id).ok_or_else(|| missing("cache"))?;
    Ok((scene, rec))
}

/// Candidate lists (with injection) and targets for every task. Fails if
/// any ground truth is left without a candidate at IoU 0.5.
pub fn prepare_rec_examples(
    corpus: &Corpus,
    store: &EmbeddingStore,
    tasks: &[RecTask],
    inject_iou: f64,
) -> Result<(Vec<RecExample>, usize, usize)> {
    let mut out = Vec::with_capacity(tasks.len());
    let (mut checked, mut injected) = (0, 0);
    for t in tasks {
        let (scene, rec) = scene_and_record(corpus, store, &t.image_id)?;
        let query = RecQuery::compose(&corpus.embedder, &t.query_terms)?;
        let cands = assemble_candidates(scene, rec, &t.gt_boxes, inject_iou)?;
        check_injection(&cands, &t.gt_boxes, inject_iou.min(DEFAULT_INJECT_IOU))?;
        checked += t.gt_boxes.len();
        injected += cands.injected();
        out.push(RecExample::new(&query, &cands, &t.gt_boxes));
    }
    Ok((out, checked, injected))
}

/// Full-batch gradient descent with momentum on the mean soft focal loss.
/// Negative tasks contribute all-zero targets.
pub fn train_rec_scorer(
    corpus: &Corpus,
    store: &EmbeddingStore,
    tasks: &[RecTask],
    cfg: &RecTrainConfig,
) -> Result<RecTraining> {
    cfg.validate()?;
    if corpus.dim() != store.dim() {
        return Err(Error::DimMismatch { expected: corpus.dim(), got: store.dim() });
    }
    let (data, gts_checked, injected) = prepare_rec_examples(corpus, store, tasks, cfg.inject_iou)?;
    let init = ToyScorer::init(corpus.dim(), cfg.hidden, cfg.seed);
    let (params, losses) = descend(init.params(), corpus.dim(), cfg, &data)?;
    let mut scorer = init.with_params(&params)?;
    scorer.trained_epochs = cfg.epochs;
    Ok(RecTraining { scorer, losses, gts_checked, injected })
}

fn descend(mut params: Vec<f64>, dim: usize, cfg: &RecTrainConfig, data: &[RecExample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut velocity = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = rec_objective(&params, dim, cfg.hidden, data, cfg.gamma);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, msg: format!("loss {loss}") });
        }
        losses.push(loss);
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
    }
    let (final_loss, _) = rec_objective(&params, dim, cfg.hidden, data, cfg.gamma);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: cfg.epochs, msg: format!("loss {final_loss}") });
    }
    losses.push(final_loss);
    Ok((params, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEvalReport {
    pub top1: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Mean score of candidates at IoU >= 0.5 with a ground truth, over positive tasks.
    pub mean_positive_score: f64,
    /// Mean score of every candidate of every negative task.
    pub mean_negative_score: f64,
    /// Scorer calls divided by tasks; 1 under the single-pass contract.
    pub invocations_per_task: f64,
    pub seed: u64,
}

/// Scores each task over cache-only candidates (no injection) and reports
/// top-1 accuracy at IoU 0.5 plus the positive/negative score split.
pub fn evaluate_rec(
    corpus: &Corpus,
    store: &EmbeddingStore,
    scorer: &ToyScorer,
    tasks: &[RecTask],
    seed: u64,
) -> Result<RecEvalReport> {
    let before = scorer.invocations();
    let mut predictions = BTreeMap::new();
    let mut gts = BTreeMap::new();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    let mut n_negative = 0;
    for (k, t) in tasks.iter().enumerate() {
        let (scene, rec) = scene_and_record(corpus, store, &t.image_id)?;
        let query = RecQuery::compose(&corpus.embedder, &t.query_terms)?;
        let cands = assemble_candidates(scene, rec, &[], DEFAULT_INJECT_IOU)?;
        let scores = score_candidates(scorer, &query, &cands)?;
        if t.is_negative() {
            n_negative += 1;
            neg_sum += scores.scores.iter().sum::<f64>();
            neg_n += scores.scores.len();
            continue;
        }
        for (b, s) in cands.boxes.iter().zip(&scores.scores) {
            if t.gt_boxes.iter().any(|g| iou(b, g) >= 0.5) {
                pos_sum += s;
                pos_n += 1;
            }
        }
        let key = format!("{k:06}");
        if let Some(p) = decode_rec(&scores, &cands, DecodeMode::Top1)?.into_iter().next() {
            // With several ground truths, the prediction is judged against its best match.
            let g = t.gt_boxes.iter().copied().max_by(|a, b| iou(&p.bbox, a).total_cmp(&iou(&p.bbox, b)));
            gts.insert(key.clone(), g.expect("positive task"));
            predictions.insert(key, p);
        } else {
            gts.insert(key, t.gt_boxes[0]);
        }
    }
    let calls = scorer.invocations() - before;
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(RecEvalReport {
        top1: crate::metrics::top1_accuracy(&predictions, &gts, 0.5),
        n_positive: tasks.len() - n_negative,
        n_negative,
        mean_positive_score: mean(pos_sum, pos_n),
        mean_negative_score: mean(neg_sum, neg_n),
        invocations_per_task: if tasks.is_empty() { 0.0 } else { calls as f64 / tasks.len() as f64 },
        seed,
    })
}
