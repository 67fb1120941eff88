//! Procedural scene corpus with hierarchical labels.
//!
//! The frozen image and text towers are replaced by a deterministic concept
//! embedder: every object paints its leaf-concept embedding (plus optional
//! Gaussian noise) into the cells of each feature grid whose centres fall
//! inside its box. Background cells carry a dedicated background embedding.
//! Objects are painted in annotation order, so a later object owns any cell
//! it shares with an earlier one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureGrid, Rect};
use crate::rng::{self, Rng};
use crate::{BBox, Grid};

/// Embedding term painted into background cells.
pub const BACKGROUND: &str = "__background__";

/// Spatial relation terms understood by the embedder.
pub const RELATIONS: [&str; 2] = ["leftmost", "rightmost"];

pub const MAX_DEPTH: usize = 3;

/// Weight of an inner concept's own direction against its leaf mean.
const INNER_OWN_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
    pub embedding_seed: u64,
}

impl ConceptNode {
    pub fn new(id: &str, name: &str, parent: Option<&str>) -> Self {
        ConceptNode {
            id: id.to_string(),
            name: name.to_string(),
            parent: parent.map(str::to_string),
            embedding_seed: rng::derive_seed(0, id),
        }
    }
}

/// A validated concept forest of depth at most [`MAX_DEPTH`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConceptNode>", into = "Vec<ConceptNode>")]
pub struct Taxonomy {
    nodes: Vec<ConceptNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<ConceptNode>> for Taxonomy {
    type Error = Error;

    fn try_from(nodes: Vec<ConceptNode>) -> Result<Self> {
        Taxonomy::new(nodes)
    }
}

impl From<Taxonomy> for Vec<ConceptNode> {
    fn from(t: Taxonomy) -> Self {
        t.nodes
    }
}

impl Taxonomy {
    pub fn new(nodes: Vec<ConceptNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("empty concept set".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.id == BACKGROUND || RELATIONS.contains(&n.id.as_str()) {
                return Err(Error::Config(format!("concept id `{}` is reserved", n.id)));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate concept id `{}`", n.id)));
            }
        }
        let t = Taxonomy { nodes, index };
        for n in &t.nodes {
            if let Some(p) = &n.parent {
                if !t.index.contains_key(p) {
                    return Err(Error::Config(format!("concept `{}` has unknown parent `{p}`", n.id)));
                }
            }
            // Walking up more than MAX_DEPTH steps means a cycle or an over-deep chain.
            let mut depth = 1;
            let mut cur = n;
            while let Some(p) = &cur.parent {
                depth += 1;
                if depth > MAX_DEPTH {
                    return Err(Error::Config(format!(
                        "concept `{}` is deeper than {MAX_DEPTH} levels or part of a cycle",
                        n.id
                    )));
                }
                cur = &t.nodes[t.index[p]];
            }
        }
        Ok(t)
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn get(&self, id: &str) -> Option<&ConceptNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Concepts without children, in declaration order.
    pub fn leaves(&self) -> Vec<&ConceptNode> {
        let parents: HashSet<&str> = self.nodes.iter().filter_map(|n| n.parent.as_deref()).collect();
        self.nodes.iter().filter(|n| !parents.contains(n.id.as_str())).collect()
    }

    /// Path from the root to `id`, coarse to fine.
    pub fn path(&self, id: &str) -> Result<Vec<String>> {
        let mut cur = self.get(id).ok_or_else(|| Error::UnknownConcept(id.to_string()))?;
        let mut path = vec![cur.id.clone()];
        while let Some(p) = &cur.parent {
            cur = self.get(p).expect("validated parent");
            path.push(cur.id.clone());
        }
        path.reverse();
        Ok(path)
    }

    /// Checks that a label path starts at a root and follows parent links.
    pub fn check_path(&self, path: &[String]) -> std::result::Result<(), String> {
        let first = path.first().ok_or("empty label path")?;
        let root = self.get(first).ok_or_else(|| format!("unknown concept `{first}`"))?;
        if root.parent.is_some() {
            return Err(format!("label path starts at non-root `{first}`"));
        }
        for w in path.windows(2) {
            let child = self.get(&w[1]).ok_or_else(|| format!("unknown concept `{}`", w[1]))?;
            if child.parent.as_deref() != Some(w[0].as_str()) {
                return Err(format!("`{}` is not a child of `{}`", w[1], w[0]));
            }
        }
        Ok(())
    }
}

/// Built-in three-level vocabulary (coarse / fine / instance).
pub fn default_taxonomy() -> Taxonomy {
    let n = ConceptNode::new;
    Taxonomy::new(vec![
        n("animal", "animal", None),
        n("dog", "dog", Some("animal")),
        n("yellow_dog", "a yellow dog", Some("dog")),
        n("black_dog", "a black dog", Some("dog")),
        n("cat", "cat", Some("animal")),
        n("white_cat", "a white cat", Some("cat")),
        n("vehicle", "vehicle", None),
        n("car", "car", Some("vehicle")),
        n("red_car", "a red car", Some("car")),
        n("blue_car", "a blue car", Some("car")),
        n("bus", "bus", Some("vehicle")),
        n("green_bus", "a green bus", Some("bus")),
    ])
    .expect("built-in taxonomy is valid")
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Deterministic text-tower stand-in: one unit vector per concept, relation
/// term and the background. Each term starts from a Gaussian direction seeded
/// by its `embedding_seed`; the set is then Gram-Schmidt orthogonalized in a
/// fixed order (background, leaves, relations, inner concepts) so distinct
/// terms are exactly orthogonal whenever `dim` allows it. Inner concepts are
/// then tilted towards their descendant leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedder {
    dim: usize,
    noise_sigma: f64,
    seed: u64,
    table: BTreeMap<String, Vec<f64>>,
}

impl ConceptEmbedder {
    pub fn new(taxonomy: &Taxonomy, dim: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        let base = rng::derive_seed(seed, "concept-embedding");
        let raw = |embedding_seed: u64| {
            let mut r = rng::stream(base, &embedding_seed.to_string());
            gaussian_unit(&mut r, dim)
        };
        // Orthogonalization order: background, leaves, relation terms, inner concepts.
        let leaves: Vec<&ConceptNode> = taxonomy.leaves();
        let mut ordered: Vec<(String, u64)> = vec![(BACKGROUND.to_string(), rng::derive_seed(0, BACKGROUND))];
        ordered.extend(leaves.iter().map(|n| (n.id.clone(), n.embedding_seed)));
        ordered.extend(RELATIONS.iter().map(|t| (t.to_string(), rng::derive_seed(0, t))));
        ordered.extend(
            taxonomy
                .nodes()
                .iter()
                .filter(|n| !leaves.iter().any(|l| l.id == n.id))
                .map(|n| (n.id.clone(), n.embedding_seed)),
        );
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut table = BTreeMap::new();
        for (id, es) in ordered {
            let v = raw(es);
            let mut r = v.clone();
            for b in &basis {
                let c: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
                r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Once the space is exhausted, later terms keep their raw direction.
            let e = if n > 1e-6 {
                r.iter_mut().for_each(|x| *x /= n);
                basis.push(r.clone());
                r
            } else {
                v
            };
            table.insert(id, e);
        }
        // An inner concept mixes its own direction with the mean direction of
        // its descendant leaves, so a coarse query still points at the objects
        // it covers while staying below cosine 0.5 with any single leaf.
        let mut mixed = Vec::new();
        for n in taxonomy.nodes().iter().filter(|n| !leaves.iter().any(|l| l.id == n.id)) {
            let mut v = vec![0.0; dim];
            for l in leaves.iter().filter(|l| taxonomy.path(&l.id).is_ok_and(|p| p.contains(&n.id))) {
                v.iter_mut().zip(&table[&l.id]).for_each(|(a, b)| *a += b);
            }
            normalize(&mut v);
            let own = &table[&n.id];
            v.iter_mut().zip(own).for_each(|(a, b)| *a += INNER_OWN_WEIGHT * b);
            normalize(&mut v);
            mixed.push((n.id.clone(), v));
        }
        table.extend(mixed);
        Ok(ConceptEmbedder { dim, noise_sigma, seed, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit-norm embedding of a concept or term.
    pub fn embed(&self, concept: &str) -> Result<&[f64]> {
        self.table
            .get(concept)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }

    /// Sum of term embeddings (not normalized): the compositional query form.
    pub fn compose(&self, terms: &[String]) -> Result<Vec<f64>> {
        let mut q = vec![0.0; self.dim];
        for t in terms {
            for (a, b) in q.iter_mut().zip(self.embed(t)?) {
                *a += b;
            }
        }
        Ok(q)
    }

    /// Noisy unit-norm view of `concept`: `normalize(e + sigma / sqrt(dim) * g)`.
    /// Exactly `e` when sigma is zero.
    pub fn perturb(&self, concept: &str, rng: &mut Rng) -> Result<Vec<f64>> {
        let e = self.embed(concept)?;
        if self.noise_sigma == 0.0 {
            return Ok(e.to_vec());
        }
        let s = self.noise_sigma / (self.dim as f64).sqrt();
        let mut v: Vec<f64> = e
            .iter()
            .map(|x| {
                let g: f64 = StandardNormal.sample(rng);
                x + s * g
            })
            .collect();
        normalize(&mut v);
        Ok(v)
    }

    /// Deterministic noisy draw for `(concept, seed, draw_index)`.
    pub fn draw(&self, concept: &str, draw_index: u64) -> Result<Vec<f64>> {
        let mut r = rng::stream(self.seed, &format!("draw/{concept}/{draw_index}"));
        self.perturb(concept, &mut r)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }
}

/// Generator configuration. Persisted next to the annotation file so grids can
/// be regenerated bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_images: usize,
    pub taxonomy: Taxonomy,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub extent: (f64, f64),
    /// Scene units per cell, one grid per entry.
    pub strides: Vec<f64>,
    /// Square object side lengths.
    pub object_sizes: Vec<f64>,
    /// Object corners lie on multiples of this step.
    pub placement_step: f64,
    /// Minimum empty margin between objects; `None` allows overlap.
    pub min_gap: Option<f64>,
}

impl WorldConfig {
    pub fn new(n_images: usize, dim: usize, seed: u64) -> Self {
        WorldConfig {
            n_images,
            taxonomy: default_taxonomy(),
            objects_per_image: (1, 4),
            dim,
            noise_sigma: 0.0,
            seed,
            extent: (64.0, 64.0),
            strides: vec![4.0, 8.0],
            object_sizes: vec![16.0, 24.0],
            placement_step: 8.0,
            min_gap: Some(8.0),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_objects(mut self, lo: usize, hi: usize) -> Self {
        self.objects_per_image = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_images == 0 {
            return cfg("n_images must be at least 1");
        }
        if self.taxonomy.leaves().is_empty() {
            return cfg("taxonomy has no leaf concepts");
        }
        if self.dim < 4 {
            return cfg("dim must be at least 4");
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return cfg("objects_per_image range is inverted");
        }
        if self.strides.is_empty() || self.strides.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return cfg("strides must be non-empty and positive");
        }
        let (w, h) = self.extent;
        for s in &self.strides {
            if (w / s).fract() != 0.0 || (h / s).fract() != 0.0 {
                return cfg("extent must be a whole number of cells at every stride");
            }
        }
        if self.object_sizes.is_empty()
            || self.object_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0 && *s <= w.min(h)))
        {
            return cfg("object sizes must be positive and fit in the extent");
        }
        if !(self.placement_step.is_finite() && self.placement_step > 0.0) {
            return cfg("placement_step must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return cfg("noise_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn embedder(&self) -> Result<ConceptEmbedder> {
        ConceptEmbedder::new(&self.taxonomy, self.dim, self.noise_sigma, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Concept ids, coarse to fine.
    #[serde(rename = "labels")]
    pub label_path: Vec<String>,
}

impl ObjectAnnotation {
    pub fn leaf(&self) -> &str {
        self.label_path.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub extent: (f64, f64),
    pub objects: Vec<ObjectAnnotation>,
    /// Multi-scale features; empty for annotation-only records.
    pub grids: Vec<Grid>,
}

impl SceneRecord {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Validation { image_id: self.image_id.clone(), msg };
        let (w, h) = self.extent;
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(bad(format!("invalid extent {w}x{h}")));
        }
        let frame = Rect { x1: 0.0, y1: 0.0, x2: w, y2: h };
        for (k, o) in self.objects.iter().enumerate() {
            o.bbox.validate().map_err(|e| bad(format!("object {k}: {e}")))?;
            if !frame.contains_rect(&o.bbox) {
                return Err(bad(format!("object {k} box {:?} leaves the image", o.bbox)));
            }
            if o.label_path.is_empty() {
                return Err(bad(format!("object {k} has no labels")));
            }
        }
        Ok(())
    }
}

/// A generated corpus: its configuration, embedder and scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: WorldConfig,
    pub embedder: ConceptEmbedder,
    pub scenes: Vec<SceneRecord>,
}

impl Corpus {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn scene(&self, image_id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.config.taxonomy.leaves().into_iter().map(|n| n.id.clone()).collect()
    }

    /// Ground-truth boxes per image.
    pub fn gt_by_image(&self) -> BTreeMap<String, Vec<BBox>> {
        self.scenes.iter().map(|s| (s.image_id.clone(), s.gt_boxes())).collect()
    }

    /// Images containing each leaf concept.
    pub fn images_by_leaf(&self) -> BTreeMap<String, HashSet<String>> {
        let mut m: BTreeMap<String, HashSet<String>> =
            self.leaf_ids().into_iter().map(|l| (l, HashSet::new())).collect();
        for s in &self.scenes {
            for o in &s.objects {
                m.entry(o.leaf().to_string()).or_default().insert(s.image_id.clone());
            }
        }
        m
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

/// Number of objects and their leaf concepts per image. Uses only the
/// `counts` and `labels` streams so the layout can be re-simulated.
fn sample_contents(cfg: &WorldConfig, leaves: &[&ConceptNode]) -> Vec<Vec<String>> {
    let mut counts = rng::stream(cfg.seed, "counts");
    let mut labels = rng::stream(cfg.seed, "labels");
    let (lo, hi) = cfg.objects_per_image;
    (0..cfg.n_images)
        .map(|_| {
            let n = counts.gen_range(lo..=hi);
            (0..n).map(|_| leaves[labels.gen_range(0..leaves.len())].id.clone()).collect()
        })
        .collect()
}

fn place_boxes(cfg: &WorldConfig, n: usize, rng: &mut Rng, image_id: &str) -> Result<Vec<BBox>> {
    const RESTARTS: usize = 200;
    const TRIES: usize = 200;
    let (w, h) = cfg.extent;
    let step = cfg.placement_step;
    'restart: for _ in 0..RESTARTS {
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..TRIES {
                let size = cfg.object_sizes[rng.gen_range(0..cfg.object_sizes.len())];
                let nx = ((w - size) / step).floor() as usize;
                let ny = ((h - size) / step).floor() as usize;
                let x1 = rng.gen_range(0..=nx) as f64 * step;
                let y1 = rng.gen_range(0..=ny) as f64 * step;
                let b = Rect::new(x1, y1, x1 + size, y1 + size)?;
                let ok = match cfg.min_gap {
                    None => true,
                    Some(g) => boxes.iter().all(|o| {
                        let grown = Rect { x1: o.x1 - g, y1: o.y1 - g, x2: o.x2 + g, y2: o.y2 + g };
                        grown.intersection_area(&b) <= 0.0
                    }),
                };
                if ok {
                    boxes.push(b);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(boxes);
    }
    Err(Error::Config(format!(
        "cannot place {n} objects in image `{image_id}`; extent too small for the layout constraints"
    )))
}

/// Paints the multi-scale grids of one scene. Deterministic in
/// `(config, embedder, image_id, objects)`.
pub fn paint_grids(
    cfg: &WorldConfig,
    embedder: &ConceptEmbedder,
    image_id: &str,
    objects: &[ObjectAnnotation],
) -> Result<Vec<Grid>> {
    let (w, h) = cfg.extent;
    let dim = cfg.dim;
    let mut grids = Vec::with_capacity(cfg.strides.len());
    for (gi, &stride) in cfg.strides.iter().enumerate() {
        let gw = (w / stride) as usize;
        let gh = (h / stride) as usize;
        let mut noise = rng::stream(cfg.seed, &format!("paint/{image_id}/{gi}"));
        let mut grid = FeatureGrid::new(gh, gw, dim, stride, vec![0.0; gh * gw * dim])?;
        let values = grid.values_mut();
        for i in 0..gh {
            let cy = (i as f64 + 0.5) * stride;
            for j in 0..gw {
                let cx = (j as f64 + 0.5) * stride;
                let owner = objects
                    .iter()
                    .rev()
                    .find(|o| cx >= o.bbox.x1 && cx < o.bbox.x2 && cy >= o.bbox.y1 && cy < o.bbox.y2)
                    .map(|o| o.leaf())
                    .unwrap_or(BACKGROUND);
                let v = embedder.perturb(owner, &mut noise)?;
                let o = (i * gw + j) * dim;
                values[o..o + dim].copy_from_slice(&v);
            }
        }
        grids.push(grid);
    }
    Ok(grids)
}

pub fn generate_corpus(cfg: &WorldConfig) -> Result<Corpus> {
    cfg.validate()?;
    let embedder = cfg.embedder()?;
    let leaves = cfg.taxonomy.leaves();
    let contents = sample_contents(cfg, &leaves);
    let mut layout = rng::stream(cfg.seed, "layout");
    let mut scenes = Vec::with_capacity(cfg.n_images);
    for (idx, leaf_ids) in contents.into_iter().enumerate() {
        let id = image_id(idx);
        let boxes = place_boxes(cfg, leaf_ids.len(), &mut layout, &id)?;
        let objects = boxes
            .into_iter()
            .zip(leaf_ids)
            .map(|(bbox, leaf)| Ok(ObjectAnnotation { bbox, label_path: cfg.taxonomy.path(&leaf)? }))
            .collect::<Result<Vec<_>>>()?;
        let grids = paint_grids(cfg, &embedder, &id, &objects)?;
        scenes.push(SceneRecord { image_id: id, extent: cfg.extent, objects, grids });
    }
    Ok(Corpus { config: cfg.clone(), embedder, scenes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Uniform over the full coarse-to-fine path.
    UniformAll,
    /// Uniform over the two finest labels.
    LastTwo,
}

impl std::str::FromStr for LabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_all" => Ok(LabelPolicy::UniformAll),
            "last_two" => Ok(LabelPolicy::LastTwo),
            other => Err(Error::Config(format!("unknown label policy `{other}`"))),
        }
    }
}

/// Draws one training label from an object's label path.
pub fn sample_label<'a>(ann: &'a ObjectAnnotation, policy: LabelPolicy, rng: &mut Rng) -> &'a str {
    let path = &ann.label_path;
    let start = match policy {
        LabelPolicy::UniformAll => 0,
        LabelPolicy::LastTwo => path.len().saturating_sub(2),
    };
    &path[rng.gen_range(start..path.len())]
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    image_id: String,
    width: f64,
    height: f64,
    objects: Vec<ObjectAnnotation>,
}

/// Path of the generator-config sidecar for an annotation file.
pub fn world_path(annotations: &Path) -> PathBuf {
    let mut s = annotations.as_os_str().to_owned();
    s.push(".world.json");
    PathBuf::from(s)
}

pub fn save_annotations(scenes: &[SceneRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        let line = AnnotationLine {
            image_id: s.image_id.clone(),
            width: s.extent.0,
            height: s.extent.1,
            objects: s.objects.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads annotation lines; returned scenes carry no grids.
pub fn load_annotations(path: &Path) -> Result<Vec<SceneRecord>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut scenes = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let scene =
            SceneRecord { image_id: a.image_id, extent: (a.width, a.height), objects: a.objects, grids: vec![] };
        scene.validate()?;
        if !seen.insert(scene.image_id.clone()) {
            return Err(Error::Validation { image_id: scene.image_id, msg: "duplicate image_id".into() });
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Writes annotations plus the generator sidecar.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    save_annotations(&corpus.scenes, path)?;
    let mut w = BufWriter::new(File::create(world_path(path))?);
    serde_json::to_writer_pretty(&mut w, &corpus.config)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads annotations and regenerates grids from the sidecar configuration.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let scenes = load_annotations(path)?;
    let wp = world_path(path);
    let f = File::open(&wp).map_err(|_| Error::MissingInput(wp.clone()))?;
    let config: WorldConfig = serde_json::from_reader(BufReader::new(f))?;
    config.validate()?;
    let embedder = config.embedder()?;
    let mut out = Vec::with_capacity(scenes.len());
    for mut s in scenes {
        for o in &s.objects {
            config
                .taxonomy
                .check_path(&o.label_path)
                .map_err(|msg| Error::Validation { image_id: s.image_id.clone(), msg })?;
        }
        s.grids = paint_grids(&config, &embedder, &s.image_id, &s.objects)?;
        out.push(s);
    }
    Ok(Corpus { config, embedder, scenes: out })
}
