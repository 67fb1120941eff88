//! Axis-aligned box arithmetic, greedy NMS and bilinear RoI pooling.
//!
//! Boxes use the continuous half-open convention `[x1, x2) x [y1, y2)` with
//! `area = (x2 - x1) * (y2 - y1)`; no `+1` pixel terms anywhere.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle. Invariant: `x1 <= x2`, `y1 <= y2`, all finite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rect<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let r = Rect { x1, y1, x2, y2 };
        r.validate()?;
        Ok(r)
    }

    pub fn from_array(a: [T; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite();
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("inverted corners in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::one() + T::one();
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Clip to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clip(&self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        let x1 = cx(self.x1);
        let y1 = cy(self.y1);
        Rect { x1, y1, x2: cx(self.x2).max(x1), y2: cy(self.y2).max(y1) }
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Rect { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Scale about the origin by a positive factor.
    pub fn scale(&self, s: T) -> Self {
        Rect { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    pub fn contains_rect(&self, other: &Self) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn cast<U: Scalar>(&self) -> Rect<U> {
        Rect {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }
}

impl<T: Scalar + Serialize> Serialize for Rect<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for Rect<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[T; 4]>::deserialize(d)?;
        // Validation happens at the owning record so errors can name the image.
        Ok(Rect { x1: a[0], y1: a[1], x2: a[2], y2: a[3] })
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one()).max(T::zero())
}

/// A box with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Scored<T> {
    #[serde(rename = "box")]
    pub bbox: Rect<T>,
    pub score: T,
}

impl<T: Scalar> Scored<T> {
    pub fn new(bbox: Rect<T>, score: T) -> Self {
        Scored { bbox, score }
    }
}

/// Ranking order used by NMS and every top-k cut: score descending, then
/// `x1` ascending, then `y1` ascending.
pub fn rank_order<T: Scalar>(a: &Scored<T>, b: &Scored<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap_or(Ordering::Equal))
        .then_with(|| a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap_or(Ordering::Equal))
}

/// Greedy non-maximum suppression. A candidate is dropped when its IoU with an
/// already kept box exceeds `iou_threshold`. Output is in rank order.
pub fn nms<T: Scalar>(candidates: &[Scored<T>], iou_threshold: T) -> Vec<Scored<T>> {
    let mut order: Vec<Scored<T>> = candidates.to_vec();
    order.sort_by(rank_order);

    let mut keep: Vec<Scored<T>> = Vec::new();
    for cand in order {
        if keep.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold) {
            keep.push(cand);
        }
    }
    keep
}

/// Dense `(height, width, dim)` feature map. `stride` is the number of scene
/// units covered by one cell; cell `(i, j)` is centred at grid coordinate
/// `(j + 0.5, i + 0.5)`, i.e. scene point `((j + 0.5) * stride, (i + 0.5) * stride)`.
#[derive(Debug)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    dim: usize,
    stride: T,
    values: Vec<T>,
    reads: AtomicU64,
}

impl<T: Clone> Clone for FeatureGrid<T> {
    fn clone(&self) -> Self {
        FeatureGrid {
            height: self.height,
            width: self.width,
            dim: self.dim,
            stride: self.stride.clone(),
            values: self.values.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl<T: PartialEq> PartialEq for FeatureGrid<T> {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.dim == other.dim
            && self.stride == other.stride
            && self.values == other.values
    }
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, dim: usize, stride: T, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "feature grid needs positive extents, got {height}x{width}x{dim}"
            )));
        }
        if !(stride.is_finite() && stride > T::zero()) {
            return Err(Error::Config("feature grid stride must be positive".into()));
        }
        if values.len() != height * width * dim {
            return Err(Error::Config(format!(
                "feature grid expects {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature grid contains non-finite values".into()));
        }
        Ok(FeatureGrid { height, width, dim, stride, values, reads: AtomicU64::new(0) })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        stride: T,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * dim);
        for i in 0..height {
            for j in 0..width {
                for d in 0..dim {
                    values.push(f(i, j, d));
                }
            }
        }
        Self::new(height, width, dim, stride, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> T {
        self.stride
    }

    /// Scene-space extent covered by the grid.
    pub fn extent(&self) -> (T, T) {
        (T::of(self.width as f64) * self.stride, T::of(self.height as f64) * self.stride)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.width + j) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Number of cell vectors read by pooling since creation or the last reset.
    pub fn read_count(&self) -> u64 {
        self.reads.load(AtomicOrdering::Relaxed)
    }

    pub fn reset_read_count(&self) {
        self.reads.store(0, AtomicOrdering::Relaxed);
    }

    /// Bilinear sample at grid coordinate `(gx, gy)` accumulated as `out += weight * f(gx, gy)`.
    /// Coordinates outside the outermost cell centres clamp to the border.
    fn sample_into(&self, gx: T, gy: T, weight: T, out: &mut [T]) {
        let half = T::of(0.5);
        let max_u = T::of((self.width - 1) as f64);
        let max_v = T::of((self.height - 1) as f64);
        let u = (gx - half).max(T::zero()).min(max_u);
        let v = (gy - half).max(T::zero()).min(max_v);
        let j0 = u.floor().to_usize().unwrap_or(0).min(self.width - 1);
        let i0 = v.floor().to_usize().unwrap_or(0).min(self.height - 1);
        let j1 = (j0 + 1).min(self.width - 1);
        let i1 = (i0 + 1).min(self.height - 1);
        let fu = u - T::of(j0 as f64);
        let fv = v - T::of(i0 as f64);
        let w00 = (T::one() - fv) * (T::one() - fu) * weight;
        let w01 = (T::one() - fv) * fu * weight;
        let w10 = fv * (T::one() - fu) * weight;
        let w11 = fv * fu * weight;
        let (c00, c01, c10, c11) = (self.cell(i0, j0), self.cell(i0, j1), self.cell(i1, j0), self.cell(i1, j1));
        for d in 0..self.dim {
            out[d] = out[d] + w00 * c00[d] + w01 * c01[d] + w10 * c10[d] + w11 * c11[d];
        }
        self.reads.fetch_add(4, AtomicOrdering::Relaxed);
    }
}

fn clipped_grid_box<T: Scalar>(grid: &FeatureGrid<T>, bbox: &Rect<T>) -> Result<Rect<T>> {
    let (w, h) = grid.extent();
    let clipped = bbox.clip(w, h);
    if clipped.area() <= T::zero() {
        return Err(Error::InvalidRegion(format!(
            "box {bbox:?} has zero area inside grid extent {w:?}x{h:?}"
        )));
    }
    Ok(clipped.scale(T::one() / grid.stride()))
}

/// Calls `f(sub_row, sub_col, gx, gy)` for the centre of each of the
/// `out_h x out_w` equal sub-cells of `gbox` (grid coordinates).
fn for_each_subcell_center<T: Scalar>(
    gbox: &Rect<T>,
    out_h: usize,
    out_w: usize,
    mut f: impl FnMut(usize, usize, T, T),
) {
    let half = T::of(0.5);
    let cw = gbox.width() / T::of(out_w as f64);
    let ch = gbox.height() / T::of(out_h as f64);
    for r in 0..out_h {
        let gy = gbox.y1 + (T::of(r as f64) + half) * ch;
        for c in 0..out_w {
            let gx = gbox.x1 + (T::of(c as f64) + half) * cw;
            f(r, c, gx, gy);
        }
    }
}

/// RoI pooling with one bilinear sample at the centre of each output sub-cell.
/// `bbox` is in scene coordinates. Returns a row-major `(out_h, out_w, dim)` buffer.
pub fn roi_pool<T: Scalar>(
    grid: &FeatureGrid<T>,
    bbox: &Rect<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidRegion("pooling resolution must be at least 1x1".into()));
    }
    let gbox = clipped_grid_box(grid, bbox)?;
    let dim = grid.dim();
    let mut out = vec![T::zero(); out_h * out_w * dim];
    for_each_subcell_center(&gbox, out_h, out_w, |r, c, gx, gy| {
        let o = (r * out_w + c) * dim;
        grid.sample_into(gx, gy, T::one(), &mut out[o..o + dim]);
    });
    Ok(out)
}

/// Sub-cell resolution used for region embeddings.
pub const REGION_POOL_SIZE: usize = 2;

/// Mean of the 2x2 RoI-pooled cells over every grid, written into `out`.
pub fn pool_region_embedding_into<T: Scalar>(
    grids: &[FeatureGrid<T>],
    bbox: &Rect<T>,
    out: &mut [T],
) -> Result<()> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Config("region pooling needs at least one grid".into()))?;
    let dim = first.dim();
    if out.len() != dim {
        return Err(Error::DimMismatch { expected: dim, got: out.len() });
    }
    for g in grids {
        if g.dim() != dim {
            return Err(Error::DimMismatch { expected: dim, got: g.dim() });
        }
    }
    out.iter_mut().for_each(|v| *v = T::zero());
    let n = REGION_POOL_SIZE * REGION_POOL_SIZE * grids.len();
    let w = T::one() / T::of(n as f64);
    for g in grids {
        let gbox = clipped_grid_box(g, bbox)?;
        for_each_subcell_center(&gbox, REGION_POOL_SIZE, REGION_POOL_SIZE, |_, _, gx, gy| {
            g.sample_into(gx, gy, w, out);
        });
    }
    Ok(())
}

pub fn pool_region_embedding<T: Scalar>(grids: &[FeatureGrid<T>], bbox: &Rect<T>) -> Result<Vec<T>> {
    let dim = grids.first().map(|g| g.dim()).unwrap_or(0);
    let mut out = vec![T::zero(); dim];
    pool_region_embedding_into(grids, bbox, &mut out)?;
    Ok(out)
}
