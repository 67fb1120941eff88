use objret::geometry::{iou, nms, pool_region_embedding, roi_pool, FeatureGrid, Rect, Scored};
use objret::{BBox, Grid, ScoredBox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IoU by counting unit cells of a `res`-times refined lattice. Exact for
/// boxes whose corners lie on that lattice.
fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
    let cells = |r: &BBox| {
        let (x1, y1, x2, y2) = ((r.x1 * res) as i64, (r.y1 * res) as i64, (r.x2 * res) as i64, (r.y2 * res) as i64);
        (x1, y1, x2, y2)
    };
    let (a, b) = (cells(a), cells(b));
    let mut inter = 0i64;
    let mut union = 0i64;
    let lo_x = a.0.min(b.0);
    let hi_x = a.2.max(b.2);
    let lo_y = a.1.min(b.1);
    let hi_y = a.3.max(b.3);
    for x in lo_x..hi_x {
        for y in lo_y..hi_y {
            let ina = x >= a.0 && x < a.2 && y >= a.1 && y < a.3;
            let inb = x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
            inter += i64::from(ina && inb);
            union += i64::from(ina || inb);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn lattice_box(rng: &mut ChaCha8Rng, extent: i64, res: f64) -> BBox {
    let mut c = || rng.gen_range(0..=extent) as f64 / res;
    let (xa, xb, ya, yb) = (c(), c(), c(), c());
    Rect::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)).unwrap()
}

#[test]
fn iou_matches_raster_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..1000 {
        let res = if k % 2 == 0 { 1.0 } else { 4.0 };
        let a = lattice_box(&mut rng, 24, res);
        let b = lattice_box(&mut rng, 24, res);
        assert_eq!(iou(&a, &b), raster_iou(&a, &b, res), "{a:?} {b:?}");
    }
}

#[test]
fn iou_worked_values() {
    let b = |x1: f64, y1: f64, x2: f64, y2: f64| Rect::new(x1, y1, x2, y2).unwrap();
    assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
    assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)), 0.0);
    assert!((iou(&b(0., 0., 2., 2.), &b(1., 0., 3., 2.)) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&b(1., 1., 1., 1.), &b(1., 1., 1., 1.)), 0.0);
}

/// Suppression through a precomputed IoU matrix and a suppressed mask.
fn nms_oracle(cands: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&cands[i], &cands[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(i.cmp(&j))
    });
    let n = order.len();
    let m: Vec<Vec<f64>> =
        order.iter().map(|&i| order.iter().map(|&j| iou(&cands[i].bbox, &cands[j].bbox)).collect()).collect();
    let mut suppressed = vec![false; n];
    let mut out = Vec::new();
    for i in 0..n {
        if suppressed[i] {
            continue;
        }
        out.push(cands[order[i]]);
        for j in i + 1..n {
            if m[i][j] > thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let b = lattice_box(rng, 16, 1.0);
            // Coarse scores so ties exercise the x1/y1 tie-break.
            Scored::new(b, rng.gen_range(0..6) as f64 / 5.0)
        })
        .collect()
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.gen_range(0..=50);
        let c = random_candidates(&mut rng, n);
        let thr = [0.0, 0.3, 0.5, 0.7, 1.0][rng.gen_range(0..5)];
        assert_eq!(nms(&c, thr), nms_oracle(&c, thr));
    }
}

#[test]
fn nms_worked_example() {
    let b = |x1: f64, y1: f64, x2: f64, y2: f64| Rect::new(x1, y1, x2, y2).unwrap();
    let a = Scored::new(b(0., 0., 10., 10.), 0.9);
    // iou(a, bb) = 80 / 120 > 0.5
    let bb = Scored::new(b(0., 2., 10., 12.), 0.8);
    let c = Scored::new(b(20., 20., 25., 25.), 0.7);
    assert_eq!(nms(&[c, bb, a], 0.5), vec![a, c]);
    assert!(nms::<f64>(&[], 0.5).is_empty());
    assert_eq!(nms(&[a], 0.5), vec![a]);
}

/// Bilinear field value of one channel at grid coordinate `(gx, gy)`,
/// clamped to the outermost cell centres.
fn field(values: &[f64], h: usize, w: usize, gx: f64, gy: f64) -> f64 {
    let u = (gx - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (gy - 0.5).clamp(0.0, (h - 1) as f64);
    let (j0, i0) = (u.floor() as usize, v.floor() as usize);
    let (j1, i1) = ((j0 + 1).min(w - 1), (i0 + 1).min(h - 1));
    let (fu, fv) = (u - j0 as f64, v - i0 as f64);
    let at = |i: usize, j: usize| values[i * w + j];
    (1.0 - fv) * ((1.0 - fu) * at(i0, j0) + fu * at(i0, j1)) + fv * ((1.0 - fu) * at(i1, j0) + fu * at(i1, j1))
}

/// Mean of the field over an 8x8 supersample of each output sub-cell.
fn supersampled_pool(values: &[f64], h: usize, w: usize, gbox: &BBox, oh: usize, ow: usize) -> Vec<f64> {
    const S: usize = 8;
    let (cw, ch) = (gbox.width() / ow as f64, gbox.height() / oh as f64);
    let mut out = Vec::new();
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for a in 0..S {
                for b in 0..S {
                    let gx = gbox.x1 + (c as f64 + (b as f64 + 0.5) / S as f64) * cw;
                    let gy = gbox.y1 + (r as f64 + (a as f64 + 0.5) / S as f64) * ch;
                    acc += field(values, h, w, gx, gy);
                }
            }
            out.push(acc / (S * S) as f64);
        }
    }
    out
}

fn smooth_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Grid) {
    let (fx, fy) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let values: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (fx * j as f64 + px).sin() * (fy * i as f64 + py).cos()))
        .collect();
    let g = FeatureGrid::new(h, w, 1, 1.0, values.clone()).unwrap();
    (values, g)
}

/// Box in grid coordinates kept between the outermost cell centres so no
/// sample is clamped.
fn interior_box(rng: &mut ChaCha8Rng, h: usize, w: usize, max_side: f64) -> BBox {
    let bw = rng.gen_range(0.1..max_side);
    let bh = rng.gen_range(0.1..max_side);
    let x1 = rng.gen_range(0.5..(w as f64 - 0.5 - bw));
    let y1 = rng.gen_range(0.5..(h as f64 - 0.5 - bh));
    Rect::new(x1, y1, x1 + bw, y1 + bh).unwrap()
}

#[test]
fn roi_pool_matches_supersampled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let (values, g) = smooth_grid(&mut rng, h, w);
        let (oh, ow) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let b = interior_box(&mut rng, h, w, 3.0);
        let got = roi_pool(&g, &b, oh, ow).unwrap();
        let want = supersampled_pool(&values, h, w, &b, oh, ow);
        for (x, y) in got.iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-3, "worst deviation {worst}");
}

#[test]
fn roi_pool_is_exact_on_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(3..16), rng.gen_range(3..16));
        let (a, b, c) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let values: Vec<f64> =
            (0..h).flat_map(|i| (0..w).map(move |j| a * (j as f64 + 0.5) + b * (i as f64 + 0.5) + c)).collect();
        let g = FeatureGrid::new(h, w, 1, 1.0, values.clone()).unwrap();
        let bx = interior_box(&mut rng, h, w, (w.min(h) as f64 - 1.0).min(6.0));
        let (oh, ow) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let got = roi_pool(&g, &bx, oh, ow).unwrap();
        let want = supersampled_pool(&values, h, w, &bx, oh, ow);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn ramp_pooling_example() {
    let values: Vec<f64> = (0..4).flat_map(|i| (0..4).map(move |j| (i + j) as f64)).collect();
    let g = FeatureGrid::new(4, 4, 1, 1.0, values).unwrap();
    let b = Rect::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let got = roi_pool(&g, &b, 2, 2).unwrap();
    // Sub-cell centres at 0.5 and 1.5 in grid coordinates map to ramp
    // positions 0 and 1 along each axis.
    let want = [0.0, 1.0, 1.0, 2.0];
    for (x, y) in got.iter().zip(want) {
        assert!((x - y).abs() < 1e-6);
    }
    let e = pool_region_embedding(std::slice::from_ref(&g), &b).unwrap();
    assert!((e[0] - 1.0).abs() < 1e-12);
}

#[test]
fn degenerate_region_is_an_error() {
    let g = FeatureGrid::new(2, 2, 1, 1.0, vec![0.0; 4]).unwrap();
    assert!(roi_pool(&g, &Rect::new(5.0, 5.0, 6.0, 6.0).unwrap(), 1, 1).is_err());
    assert!(roi_pool(&g, &Rect::new(1.0, 1.0, 1.0, 2.0).unwrap(), 1, 1).is_err());
}

#[test]
fn opposite_grids_cancel() {
    let v: Grid = FeatureGrid::new(3, 3, 2, 1.0, vec![0.7; 18]).unwrap();
    let nv = FeatureGrid::new(3, 3, 2, 1.0, vec![-0.7; 18]).unwrap();
    let e = pool_region_embedding(&[v, nv], &Rect::new(0.3, 0.2, 2.5, 2.9).unwrap()).unwrap();
    assert!(e.iter().all(|x| x.abs() < 1e-15));
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.0..30.0f64, 0.0..30.0f64)
        .prop_map(|(x, y, w, h)| Rect::new(x, y, x + w, y + h).unwrap())
}

fn arb_candidates() -> impl Strategy<Value = Vec<ScoredBox>> {
    prop::collection::vec(
        ((0i32..12, 0i32..12, 1i32..8, 1i32..8), 0u8..5).prop_map(|((x, y, w, h), s)| {
            Scored::new(Rect::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap(), f64::from(s) / 4.0)
        }),
        0..50,
    )
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn iou_with_self_is_one(a in arb_box()) {
        prop_assume!(a.area() > 1e-9);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_and_scale_invariant(
        a in arb_box(), b in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64, s in 0.1..10.0f64
    ) {
        let v = iou(&a, &b);
        prop_assert!((iou(&a.translate(dx, dy), &b.translate(dx, dy)) - v).abs() < 1e-9);
        prop_assert!((iou(&a.scale(s), &b.scale(s)) - v).abs() < 1e-9);
    }

    #[test]
    fn nms_equals_oracle_and_is_idempotent(c in arb_candidates(), t in 0.0..1.0f64) {
        let once = nms(&c, t);
        prop_assert_eq!(&once, &nms_oracle(&c, t));
        prop_assert_eq!(&nms(&once, t), &once);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= t);
                prop_assert!(a.score >= b.score);
            }
        }
    }

    #[test]
    fn constant_grid_pools_to_constant(c in -5.0..5.0f64, b in arb_box()) {
        let g = FeatureGrid::new(8, 8, 3, 8.0, vec![c; 8 * 8 * 3]).unwrap();
        let clipped = b.clip(64.0, 64.0);
        prop_assume!(clipped.area() > 1e-9);
        for v in roi_pool(&g, &b, 2, 3).unwrap() {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }
}
