//! Objectness probing over frozen region embeddings.
//!
//! A single learned direction `w` (plus a logit scale and bias) scores how
//! object-like a region embedding is:
//! `score = sigmoid(scale * <w / |w|, e> + bias)`. It is trained with a soft
//! focal loss whose targets are the IoU of each candidate with its best
//! ground truth. The same loss trains the REC scorer.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, pool_region_embedding_into, rank_order, Rect, Scored};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthworld::SceneRecord;
use crate::{BBox, Grid, ScoredBox};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Soft-target focal loss `|y - p|^gamma * BCE(p, y)`.
pub fn soft_focal_loss<T: Scalar>(p: T, y: T, gamma: T) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::Domain(format!("probability {p:?} outside (0, 1)")));
    }
    let ce = -(y * p.ln()) - (T::one() - y) * (T::one() - p).ln();
    let m = if gamma == T::zero() { T::one() } else { (y - p).abs().powf(gamma) };
    Ok(m * ce)
}

/// Soft focal loss evaluated from a logit `z`, and its derivative in `z`.
/// Finite for every finite `z`, unlike the probability form.
pub fn soft_focal_loss_logit(z: f64, y: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    // -ln p = softplus(-z), -ln(1 - p) = softplus(z)
    let ce = y * softplus(-z) + (1.0 - y) * softplus(z);
    let d = p - y;
    let (m, dm_dp) = if gamma == 0.0 {
        (1.0, 0.0)
    } else {
        let a = d.abs();
        let m = a.powf(gamma);
        let dm = if a == 0.0 { 0.0 } else { gamma * a.powf(gamma - 1.0) * d.signum() };
        (m, dm)
    };
    // dCE/dz = p - y; dm/dz = dm/dp * p (1 - p)
    let grad = m * d + dm_dp * p * (1.0 - p) * ce;
    (m * ce, grad)
}

/// IoU of each proposal with its best-matching ground truth; zeros when there is none.
pub fn soft_labels(proposals: &[BBox], gts: &[BBox]) -> Vec<f64> {
    proposals
        .iter()
        .map(|p| gts.iter().map(|g| iou(p, g)).fold(0.0, f64::max))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeFile", into = "ProbeFile")]
pub struct ObjectnessProbe {
    pub weight: Vec<f64>,
    pub scale: f64,
    pub bias: f64,
    pub trained_epochs: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    dim: usize,
    weight: Vec<f64>,
    scale: f64,
    bias: f64,
    trained_epochs: usize,
    seed: u64,
}

impl From<ObjectnessProbe> for ProbeFile {
    fn from(p: ObjectnessProbe) -> Self {
        ProbeFile {
            dim: p.weight.len(),
            weight: p.weight,
            scale: p.scale,
            bias: p.bias,
            trained_epochs: p.trained_epochs,
            seed: p.seed,
        }
    }
}

impl TryFrom<ProbeFile> for ObjectnessProbe {
    type Error = Error;

    fn try_from(f: ProbeFile) -> Result<Self> {
        if f.weight.len() != f.dim {
            return Err(Error::DimMismatch { expected: f.dim, got: f.weight.len() });
        }
        let p = ObjectnessProbe {
            weight: f.weight,
            scale: f.scale,
            bias: f.bias,
            trained_epochs: f.trained_epochs,
            seed: f.seed,
        };
        p.validate()?;
        Ok(p)
    }
}

impl ObjectnessProbe {
    pub fn new(weight: Vec<f64>, scale: f64, bias: f64) -> Result<Self> {
        let p = ObjectnessProbe { weight, scale, bias, trained_epochs: 0, seed: 0 };
        p.validate()?;
        Ok(p)
    }

    /// Seeded starting point for training: a random unit direction, unit scale, zero bias.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe/init");
        let mut weight: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = norm(&weight);
        weight.iter_mut().for_each(|w| *w /= n);
        ObjectnessProbe { weight, scale: 1.0, bias: 0.0, trained_epochs: 0, seed }
    }

    /// Hand-built probe pointing from the background towards the mean object
    /// embedding. Serves as a reference scorer for synthetic worlds.
    pub fn oracle(object_embeddings: &[&[f64]], background: &[f64]) -> Result<Self> {
        let dim = background.len();
        if object_embeddings.is_empty() {
            return Err(Error::Config("oracle probe needs at least one object embedding".into()));
        }
        let mut w = vec![0.0; dim];
        for e in object_embeddings {
            if e.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: e.len() });
            }
            for (a, b) in w.iter_mut().zip(e.iter()) {
                *a += b / object_embeddings.len() as f64;
            }
        }
        for (a, b) in w.iter_mut().zip(background) {
            *a -= b;
        }
        Self::new(w, 20.0, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.is_empty() {
            return Err(Error::Config("probe weight is empty".into()));
        }
        if self.weight.iter().any(|w| !w.is_finite()) || !self.scale.is_finite() || !self.bias.is_finite() {
            return Err(Error::Config("probe parameters must be finite".into()));
        }
        if self.scale < 0.0 {
            return Err(Error::Config("probe scale must be non-negative".into()));
        }
        Ok(())
    }

    fn unit_weight(&self) -> Result<Vec<f64>> {
        let n = norm(&self.weight);
        if n == 0.0 {
            return Err(Error::Domain("probe weight has zero norm".into()));
        }
        Ok(self.weight.iter().map(|w| w / n).collect())
    }

    /// Objectness of one unit-norm embedding.
    pub fn score(&self, embedding: &[f64]) -> Result<f64> {
        let u = self.unit_weight()?;
        if embedding.len() != u.len() {
            return Err(Error::DimMismatch { expected: u.len(), got: embedding.len() });
        }
        Ok(sigmoid(self.scale * dot(&u, embedding) + self.bias))
    }

    /// A scorer with the weight normalization hoisted out of the loop.
    pub fn scorer(&self) -> Result<impl Fn(&[f64]) -> f64 + Sync + '_> {
        let u = self.unit_weight()?;
        Ok(move |e: &[f64]| sigmoid(self.scale * dot(&u, e) + self.bias))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn probe_score(probe: &ObjectnessProbe, embedding: &[f64]) -> Result<f64> {
    probe.score(embedding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub seed: u64,
    pub positive_iou: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { lr: 1.0, momentum: 0.9, epochs: 300, gamma: 2.0, seed: 0, positive_iou: 0.5 }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.momentum.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.gamma.is_finite()
            && self.gamma >= 0.0
            && self.positive_iou.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid probe training config {self:?}")))
        }
    }
}

/// Region embeddings (row-major, unit norm) with soft labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledEmbeddings {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub labels: Vec<f64>,
}

impl LabeledEmbeddings {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, embedding: &[f64], label: f64) {
        self.embeddings.extend_from_slice(embedding);
        self.labels.push(label);
    }
}

const OBJECTIVE_CHUNK: usize = 2048;

/// Flat parameter vector `[w.., scale, bias]` used by the optimizer.
pub fn probe_params(p: &ObjectnessProbe) -> Vec<f64> {
    let mut v = p.weight.clone();
    v.push(p.scale);
    v.push(p.bias);
    v
}

/// Mean soft focal loss over `data` and its analytic gradient in the flat parameters.
pub fn probe_objective(params: &[f64], data: &LabeledEmbeddings, gamma: f64) -> (f64, Vec<f64>) {
    let dim = data.dim;
    let w = &params[..dim];
    let scale = params[dim];
    let bias = params[dim + 1];
    let wn = norm(w);
    let u: Vec<f64> = w.iter().map(|x| x / wn).collect();
    let n = data.len().max(1) as f64;

    // Fixed chunks reduced in order keep the sum bit-identical across thread counts.
    let rows: Vec<usize> = (0..data.len()).collect();
    let partials: Vec<(f64, Vec<f64>, f64, f64)> = rows
        .par_chunks(OBJECTIVE_CHUNK)
        .map(|chunk| {
            let (mut l, mut gp, mut gs, mut gb) = (0.0, vec![0.0; dim], 0.0, 0.0);
            for &i in chunk {
                let e = data.row(i);
                let c = dot(&u, e);
                let (li, dz) = soft_focal_loss_logit(scale * c + bias, data.labels[i], gamma);
                l += li;
                gs += dz * c;
                gb += dz;
                // d c / d w = (e - u c) / |w|; accumulate dz * scale * e here and
                // remove the radial component once at the end.
                let k = dz * scale;
                gp.iter_mut().zip(e).for_each(|(g, x)| *g += k * x);
            }
            (l, gp, gs, gb)
        })
        .collect();
    let (mut loss, mut g_proj, mut g_scale, mut g_bias) = (0.0, vec![0.0; dim], 0.0, 0.0);
    for (l, gp, gs, gb) in partials {
        loss += l;
        g_proj.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
        g_scale += gs;
        g_bias += gb;
    }

    let radial = dot(&g_proj, &u);
    let mut grad: Vec<f64> = g_proj.iter().zip(&u).map(|(g, ui)| (g - radial * ui) / wn / n).collect();
    grad.push(g_scale / n);
    grad.push(g_bias / n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTraining {
    pub probe: ObjectnessProbe,
    /// Mean loss at the start of each epoch, followed by the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent with momentum on the mean soft focal loss.
pub fn train_probe(data: &LabeledEmbeddings, cfg: &ProbeTrainConfig) -> Result<ProbeTraining> {
    cfg.validate()?;
    if data.dim == 0 || data.embeddings.len() != data.len() * data.dim {
        return Err(Error::Config("training embeddings are malformed".into()));
    }
    let has_pos = data.labels.iter().any(|&y| y > cfg.positive_iou);
    let has_neg = data.labels.iter().any(|&y| y < cfg.positive_iou);
    if !(has_pos && has_neg) {
        return Err(Error::Config(format!(
            "probe training needs labels on both sides of positive_iou = {}",
            cfg.positive_iou
        )));
    }

    let init = ObjectnessProbe::init(data.dim, cfg.seed);
    let mut params = probe_params(&init);
    let mut velocity = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = probe_objective(&params, data, cfg.gamma);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, msg: format!("loss {loss}") });
        }
        losses.push(loss);
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, msg: "non-finite parameters".into() });
        }
    }
    let (final_loss, _) = probe_objective(&params, data, cfg.gamma);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: cfg.epochs, msg: format!("loss {final_loss}") });
    }
    losses.push(final_loss);

    let dim = data.dim;
    let probe = ObjectnessProbe {
        weight: params[..dim].to_vec(),
        // The objective is smooth through zero but the contract wants a non-negative scale.
        scale: params[dim].max(0.0),
        bias: params[dim + 1],
        trained_epochs: cfg.epochs,
        seed: cfg.seed,
    };
    probe.validate()?;
    Ok(ProbeTraining { probe, losses })
}

/// Dense square-anchor candidate source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Spacing of anchor corners, in cells of the finest grid.
    pub stride: usize,
    /// Square anchor side lengths in scene units.
    pub scales: Vec<f64>,
    pub nms_iou: f64,
    pub k: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { stride: 1, scales: vec![16.0, 24.0, 32.0], nms_iou: 0.5, k: 100 }
    }
}

impl AnchorConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }
}

/// Every anchor that fits inside the finest grid: for each stride-spaced cell
/// and each scale, a square whose top-left corner is that cell's corner.
pub fn anchors(grids: &[Grid], cfg: &AnchorConfig) -> Result<Vec<BBox>> {
    if cfg.stride == 0 {
        return Err(Error::Config("anchor stride must be at least 1".into()));
    }
    if cfg.scales.is_empty() {
        return Err(Error::Config("anchor scales must be non-empty".into()));
    }
    let finest = grids
        .iter()
        .min_by(|a, b| a.stride().total_cmp(&b.stride()))
        .ok_or_else(|| Error::Config("no feature grids".into()))?;
    let (w, h) = finest.extent();
    let step = finest.stride() * cfg.stride as f64;
    let mut out = Vec::new();
    for &s in &cfg.scales {
        let mut y = 0.0;
        while y + s <= h {
            let mut x = 0.0;
            while x + s <= w {
                out.push(Rect::new(x, y, x + s, y + s)?);
                x += step;
            }
            y += step;
        }
    }
    Ok(out)
}

/// Unit-norm pooled embedding of `bbox`. Fails on a zero vector.
pub fn region_embedding(grids: &[Grid], bbox: &BBox, out: &mut [f64]) -> Result<()> {
    pool_region_embedding_into(grids, bbox, out)?;
    let n = norm(out);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidRegion(format!("region {bbox:?} pools to a zero vector")));
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// A proposal before caching: box, objectness and the pooled unit embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawProposal {
    pub scored: ScoredBox,
    pub embedding: Vec<f64>,
}

/// Score every anchor, suppress, keep the top `k`, and keep the embeddings.
pub fn propose_with_embeddings(
    grids: &[Grid],
    probe: &ObjectnessProbe,
    cfg: &AnchorConfig,
) -> Result<Vec<RawProposal>> {
    if cfg.k == 0 {
        return Ok(Vec::new());
    }
    let dim = grids.first().map(|g| g.dim()).unwrap_or(0);
    if probe.dim() != dim {
        return Err(Error::DimMismatch { expected: dim, got: probe.dim() });
    }
    let score = probe.scorer()?;
    let boxes = anchors(grids, cfg)?;
    let mut emb = vec![0.0; dim * boxes.len()];
    let mut scored = Vec::with_capacity(boxes.len());
    for (b, e) in boxes.iter().zip(emb.chunks_mut(dim)) {
        region_embedding(grids, b, e)?;
        scored.push(Scored::new(*b, score(e)));
    }
    // Map surviving boxes back to their embeddings through their anchor index.
    let mut indexed: Vec<(usize, ScoredBox)> = scored.into_iter().enumerate().collect();
    indexed.sort_by(|a, b| rank_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<(usize, ScoredBox)> = Vec::new();
    for (i, cand) in indexed {
        if keep.len() == cfg.k {
            break;
        }
        if keep.iter().all(|(_, k)| iou(&k.bbox, &cand.bbox) <= cfg.nms_iou) {
            keep.push((i, cand));
        }
    }
    Ok(keep
        .into_iter()
        .map(|(i, s)| RawProposal { scored: s, embedding: emb[i * dim..(i + 1) * dim].to_vec() })
        .collect())
}

/// Dense proposals for one image: anchors scored by the probe, NMS, top-k.
pub fn propose(grids: &[Grid], probe: &ObjectnessProbe, cfg: &AnchorConfig) -> Result<Vec<ScoredBox>> {
    Ok(propose_with_embeddings(grids, probe, cfg)?.into_iter().map(|p| p.scored).collect())
}

/// Same as [`propose`] but through the generic [`nms`]; used as a cross-check.
pub fn propose_reference(grids: &[Grid], probe: &ObjectnessProbe, cfg: &AnchorConfig) -> Result<Vec<ScoredBox>> {
    let dim = grids.first().map(|g| g.dim()).unwrap_or(0);
    let mut e = vec![0.0; dim];
    let mut scored = Vec::new();
    for b in anchors(grids, cfg)? {
        region_embedding(grids, &b, &mut e)?;
        scored.push(Scored::new(b, probe.score(&e)?));
    }
    let mut out = nms(&scored, cfg.nms_iou);
    out.truncate(cfg.k);
    Ok(out)
}

/// Anchor embeddings of every scene, labelled by IoU with the scene's ground truth.
pub fn collect_training_set(scenes: &[SceneRecord], cfg: &AnchorConfig) -> Result<LabeledEmbeddings> {
    let dim = scenes
        .first()
        .and_then(|s| s.grids.first())
        .map(|g| g.dim())
        .ok_or_else(|| Error::Config("training scenes carry no feature grids".into()))?;
    let parts: Vec<LabeledEmbeddings> = scenes
        .par_iter()
        .map(|s| {
            let boxes = anchors(&s.grids, cfg)?;
            let labels = soft_labels(&boxes, &s.gt_boxes());
            let mut part = LabeledEmbeddings { dim, ..Default::default() };
            let mut e = vec![0.0; dim];
            for (b, y) in boxes.iter().zip(labels) {
                region_embedding(&s.grids, b, &mut e)?;
                part.push(&e, y);
            }
            Ok(part)
        })
        .collect::<Result<_>>()?;
    let mut all = LabeledEmbeddings { dim, ..Default::default() };
    for p in parts {
        all.embeddings.extend(p.embeddings);
        all.labels.extend(p.labels);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_loss_closed_forms() {
        assert_eq!(soft_focal_loss(0.3, 0.3, 2.0).unwrap(), 0.0);
        let v: f64 = soft_focal_loss(0.5, 1.0, 2.0).unwrap();
        assert!((v - 0.173_287).abs() < 1e-6, "{v}");
        let bce: f64 = soft_focal_loss(0.5, 0.0, 0.0).unwrap();
        assert!((bce - 0.693_147).abs() < 1e-6);
        assert!(soft_focal_loss(0.0, 1.0, 2.0).is_err());
        assert!(soft_focal_loss(1.0, 1.0, 2.0).is_err());
        let f32v = soft_focal_loss(0.5f32, 1.0, 2.0).unwrap();
        assert!((f32v - 0.173_287).abs() < 1e-6);
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        for &(z, y, g) in &[(0.3, 0.2, 2.0), (-2.0, 1.0, 2.0), (4.0, 0.0, 0.0), (1.0, 0.7, 1.5)] {
            let (l, _) = soft_focal_loss_logit(z, y, g);
            let p = soft_focal_loss(sigmoid(z), y, g).unwrap();
            assert!((l - p).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_derivative_matches_finite_difference() {
        let h = 1e-6;
        for &(z, y, g) in &[(0.3, 0.2, 2.0), (-2.0, 1.0, 2.0), (4.0, 0.0, 0.0), (1.0, 0.7, 1.5)] {
            let (_, d) = soft_focal_loss_logit(z, y, g);
            let fd = (soft_focal_loss_logit(z + h, y, g).0 - soft_focal_loss_logit(z - h, y, g).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-7, "{d} vs {fd}");
        }
    }

    #[test]
    fn soft_label_cases() {
        let b = |x1, y1, x2, y2| Rect::new(x1, y1, x2, y2).unwrap();
        assert_eq!(soft_labels(&[b(0., 0., 2., 2.)], &[b(0., 0., 2., 2.)]), vec![1.0]);
        assert_eq!(soft_labels(&[b(0., 0., 2., 2.), b(1., 1., 3., 3.)], &[]), vec![0.0, 0.0]);
        let l = soft_labels(&[b(0., 0., 2., 2.)], &[b(1., 0., 3., 2.), b(10., 10., 11., 11.)]);
        assert!((l[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probe_score_cases() {
        let p = ObjectnessProbe::new(vec![2.0, 0.0], 1.0, 0.0).unwrap();
        assert_eq!(p.score(&[0.0, 1.0]).unwrap(), 0.5);
        assert!((p.score(&[1.0, 0.0]).unwrap() - 0.731_058_578_6).abs() < 1e-9);
        let mut last = 1.0;
        for s in [1.0, 10.0, 100.0] {
            let q = ObjectnessProbe::new(vec![2.0, 0.0], s, 0.0).unwrap();
            let v = q.score(&[-1.0, 0.0]).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-40);
        let z = ObjectnessProbe::new(vec![0.0, 0.0], 1.0, 0.0).unwrap();
        assert!(matches!(z.score(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(p.score(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn probe_json_round_trip_and_validation() {
        let p = ObjectnessProbe::init(5, 3);
        let s = p.to_json().unwrap();
        assert!(s.contains("\"dim\": 5"));
        assert_eq!(ObjectnessProbe::from_json(&s).unwrap(), p);
        let bad = s.replace("\"dim\": 5", "\"dim\": 4");
        assert!(ObjectnessProbe::from_json(&bad).is_err());
    }

    #[test]
    fn training_requires_both_label_sides() {
        let mut d = LabeledEmbeddings { dim: 2, ..Default::default() };
        d.push(&[1.0, 0.0], 0.9);
        d.push(&[0.0, 1.0], 0.8);
        assert!(matches!(train_probe(&d, &ProbeTrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut d = LabeledEmbeddings { dim: 2, ..Default::default() };
        d.push(&[1.0, 0.0], 0.9);
        d.push(&[0.0, 1.0], 0.1);
        let cfg = ProbeTrainConfig { lr: 0.0, epochs: 25, seed: 9, ..Default::default() };
        let t = train_probe(&d, &cfg).unwrap();
        let init = ObjectnessProbe::init(2, 9);
        assert_eq!(t.probe.weight, init.weight);
        assert_eq!(t.probe.scale, init.scale);
        assert_eq!(t.probe.bias, init.bias);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut d = LabeledEmbeddings { dim: 2, ..Default::default() };
        d.push(&[1.0, 0.0], 0.9);
        d.push(&[0.0, f64::INFINITY], 0.1);
        let cfg = ProbeTrainConfig { epochs: 50, ..Default::default() };
        let r = train_probe(&d, &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn k_zero_gives_no_proposals() {
        let g = Grid::from_fn(8, 8, 4, 4.0, |_, _, d| if d == 0 { 1.0 } else { 0.0 }).unwrap();
        let p = ObjectnessProbe::new(vec![1.0, 0.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        let cfg = AnchorConfig::default().with_k(0);
        assert!(propose(std::slice::from_ref(&g), &p, &cfg).unwrap().is_empty());
    }
}
