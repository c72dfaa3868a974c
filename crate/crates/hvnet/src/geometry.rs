//! Oriented BEV box algebra: corners, convex clipping, rotated IoU,
//! rotated NMS, and the quad-to-box fit used by corner-offset decoding.

use crate::error::{HvError, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// On-edge classification tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-9;

/// Oriented rectangle in the x-y ground plane. `length` runs along the
/// heading axis, `width` across it; yaw is normalized to [0, pi) since a
/// BEV rectangle is pi-periodic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBoxBEV {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

/// Normalize an angle into [0, pi).
pub fn wrap_yaw(yaw: f64) -> f64 {
    let mut y = yaw.rem_euclid(PI);
    if y >= PI {
        y -= PI;
    }
    y
}

impl RotatedBoxBEV {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        RotatedBoxBEV {
            cx,
            cy,
            length,
            width,
            yaw: wrap_yaw(yaw),
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Counter-clockwise corners starting from the (+l/2, +w/2) corner of
    /// the box frame rotated by yaw.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(u, v)| (self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    /// Whether a BEV point lies inside (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }
}

/// Oriented BEV rectangle extended with a vertical slab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub bev: RotatedBoxBEV,
    pub z_center: f64,
    pub height: f64,
}

impl Box3D {
    pub fn new(bev: RotatedBoxBEV, z_center: f64, height: f64) -> Self {
        Box3D {
            bev,
            z_center,
            height,
        }
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (z - self.z_center).abs() <= self.height / 2.0 && self.bev.contains(x, y)
    }
}

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Clip a polygon against the half-plane on the left of directed edge a->b.
fn clip_halfplane(poly: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let sc = side(cur);
        let sn = side(next);
        if sc >= -CLIP_EPS {
            out.push(cur);
        }
        if (sc > CLIP_EPS && sn < -CLIP_EPS) || (sc < -CLIP_EPS && sn > CLIP_EPS) {
            let t = sc / (sc - sn);
            out.push((cur.0 + t * (next.0 - cur.0), cur.1 + t * (next.1 - cur.1)));
        }
    }
    out
}

/// Intersection area of two convex CCW polygons (Sutherland-Hodgman).
pub fn convex_intersection_area(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> f64 {
    let mut poly = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_halfplane(&poly, clip[i], clip[(i + 1) % n]);
    }
    polygon_area(&poly).abs()
}

/// Rotated intersection-over-union of two BEV boxes.
pub fn riou(a: &RotatedBoxBEV, b: &RotatedBoxBEV) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.length > 0.0 && bx.width > 0.0)
            || !bx.length.is_finite()
            || !bx.width.is_finite()
        {
            return Err(HvError::Domain(format!(
                "degenerate box {} x {} in riou",
                bx.length, bx.width
            )));
        }
    }
    let inter = convex_intersection_area(&a.corners(), &b.corners());
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Greedy rotated NMS. Boxes with score below `score_threshold` are
/// pre-filtered; the rest are visited in descending score order (ties by
/// lower index) and kept unless they overlap an already-kept box with
/// RIoU strictly above `iou_threshold`. Returns kept indices in visit order.
pub fn rotated_nms(
    boxes: &[RotatedBoxBEV],
    scores: &[f64],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(HvError::dim(
            "rotated_nms",
            format!("{} boxes vs {} scores", boxes.len(), scores.len()),
        ));
    }
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| scores[i] >= score_threshold)
        .collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        for &k in &kept {
            if riou(&boxes[i], &boxes[k])? > iou_threshold {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), p3: (f64, f64), p4: (f64, f64)) -> bool {
    let d = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
    };
    let d1 = d(p3, p4, p1);
    let d2 = d(p3, p4, p2);
    let d3 = d(p1, p2, p3);
    let d4 = d(p1, p2, p4);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Fit an oriented box to 4 ordered vertices: center is the vertex mean,
/// side lengths the means of opposite edges, yaw the circular (mod pi)
/// mean of the two heading edges. Exact inverse of
/// [`RotatedBoxBEV::corners`] on perfect rectangles.
pub fn fit_box_from_quad(quad: &[(f64, f64); 4]) -> Result<RotatedBoxBEV> {
    if segments_cross(quad[0], quad[1], quad[2], quad[3])
        || segments_cross(quad[1], quad[2], quad[3], quad[0])
    {
        return Err(HvError::Domain("self-intersecting quad".into()));
    }
    let cx = quad.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let cy = quad.iter().map(|p| p.1).sum::<f64>() / 4.0;

    // Heading edges run corner0->corner1 and corner3->corner2; the other
    // pair spans the width.
    let e_len = [
        (quad[0].0 - quad[1].0, quad[0].1 - quad[1].1),
        (quad[3].0 - quad[2].0, quad[3].1 - quad[2].1),
    ];
    let e_wid = [
        (quad[0].0 - quad[3].0, quad[0].1 - quad[3].1),
        (quad[1].0 - quad[2].0, quad[1].1 - quad[2].1),
    ];
    let norm = |v: (f64, f64)| (v.0 * v.0 + v.1 * v.1).sqrt();
    let length = (norm(e_len[0]) + norm(e_len[1])) / 2.0;
    let width = (norm(e_wid[0]) + norm(e_wid[1])) / 2.0;
    if length <= 0.0 || width <= 0.0 {
        return Err(HvError::Domain("degenerate quad".into()));
    }

    // Circular mean of edge directions modulo pi via angle doubling.
    let (mut sx, mut sy) = (0.0, 0.0);
    for e in e_len {
        let t = e.1.atan2(e.0);
        sx += (2.0 * t).cos();
        sy += (2.0 * t).sin();
    }
    let yaw = wrap_yaw(sy.atan2(sx) / 2.0);
    Ok(RotatedBoxBEV::new(cx, cy, length, width, yaw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unit_square_corners_ccw() {
        let b = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let c = b.corners();
        assert_eq!(c[0], (0.5, 0.5));
        assert_eq!(c[1], (-0.5, 0.5));
        assert_eq!(c[2], (-0.5, -0.5));
        assert_eq!(c[3], (0.5, -0.5));
        assert!(polygon_area(&c) > 0.0);
    }

    #[test]
    fn rotated_corners_transpose() {
        // l=2 w=1 at yaw pi/2 occupies the transposed rectangle.
        let b = RotatedBoxBEV::new(0.0, 0.0, 2.0, 1.0, PI / 2.0);
        let c = b.corners();
        assert!(close(c[0].0, -0.5, 1e-12) && close(c[0].1, 1.0, 1e-12));
        assert!(close(c[2].0, 0.5, 1e-12) && close(c[2].1, -1.0, 1e-12));
    }

    #[test]
    fn corner_area_matches_shoelace() {
        let mut rng = crate::rng(11);
        for _ in 0..50 {
            let b = RotatedBoxBEV::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.2..4.0),
                rng.gen_range(0.2..4.0),
                rng.gen_range(0.0..PI),
            );
            assert!(close(polygon_area(&b.corners()), b.area(), 1e-9));
        }
    }

    #[test]
    fn riou_identical_is_one() {
        let b = RotatedBoxBEV::new(1.0, 2.0, 3.0, 1.5, 0.7);
        assert!(close(riou(&b, &b).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn riou_offset_squares_is_third() {
        let a = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = RotatedBoxBEV::new(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!(close(riou(&a, &b).unwrap(), 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn riou_quarter_turn_octagon() {
        // Unit square vs itself rotated pi/4: the intersection is a regular
        // octagon of area 2(sqrt(2)-1), so IoU = sqrt(2)/2 ~ 0.7071.
        let a = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let inter = 2.0 * (2.0_f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert!(close(expect, 2.0_f64.sqrt() / 2.0, 1e-12));
        assert!(close(riou(&a, &b).unwrap(), expect, 1e-6));
        assert!(close(expect, 0.7071, 5e-5));
    }

    #[test]
    fn riou_degenerate_is_error() {
        let a = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let z = RotatedBoxBEV::new(0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(riou(&a, &z).is_err());
    }

    #[test]
    fn riou_symmetric_and_rigid_invariant() {
        let mut rng = crate::rng(5);
        for _ in 0..40 {
            let a = RotatedBoxBEV::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..PI),
            );
            let b = RotatedBoxBEV::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..PI),
            );
            let ab = riou(&a, &b).unwrap();
            let ba = riou(&b, &a).unwrap();
            assert!(close(ab, ba, 1e-12));

            // Joint rigid motion.
            let (dt, dx, dy) = (
                rng.gen_range(0.0..PI),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let (s, c) = dt.sin_cos();
            let mv = |b: &RotatedBoxBEV| {
                RotatedBoxBEV::new(
                    c * b.cx - s * b.cy + dx,
                    s * b.cx + c * b.cy + dy,
                    b.length,
                    b.width,
                    b.yaw + dt,
                )
            };
            let moved = riou(&mv(&a), &mv(&b)).unwrap();
            assert!(close(ab, moved, 1e-9), "{ab} vs {moved}");
        }
    }

    #[test]
    fn nms_greedy_trace() {
        let b = RotatedBoxBEV::new(0.0, 0.0, 2.0, 1.0, 0.3);
        let kept = rotated_nms(&[b, b], &[0.9, 0.8], 0.4, 0.0).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_disjoint_all_kept() {
        let a = RotatedBoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = RotatedBoxBEV::new(10.0, 0.0, 1.0, 1.0, 0.0);
        let kept = rotated_nms(&[a, b], &[0.5, 0.9], 0.4, 0.0).unwrap();
        assert_eq!(kept, vec![1, 0]);
    }

    #[test]
    fn nms_empty_input() {
        assert!(rotated_nms(&[], &[], 0.4, 0.2).unwrap().is_empty());
    }

    #[test]
    fn nms_idempotent_on_own_output() {
        let mut rng = crate::rng(23);
        let boxes: Vec<RotatedBoxBEV> = (0..20)
            .map(|_| {
                RotatedBoxBEV::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.0..PI),
                )
            })
            .collect();
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let kept = rotated_nms(&boxes, &scores, 0.3, 0.1).unwrap();
        let boxes2: Vec<_> = kept.iter().map(|&i| boxes[i]).collect();
        let scores2: Vec<_> = kept.iter().map(|&i| scores[i]).collect();
        let kept2 = rotated_nms(&boxes2, &scores2, 0.3, 0.1).unwrap();
        assert_eq!(kept2, (0..kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn fit_box_round_trips_random_boxes() {
        let mut rng = crate::rng(77);
        for _ in 0..100 {
            let b = RotatedBoxBEV::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.3..4.0),
                rng.gen_range(0.3..4.0),
                rng.gen_range(0.0..PI),
            );
            let f = fit_box_from_quad(&b.corners()).unwrap();
            assert!(close(f.cx, b.cx, 1e-9));
            assert!(close(f.cy, b.cy, 1e-9));
            assert!(close(f.length, b.length, 1e-9));
            assert!(close(f.width, b.width, 1e-9));
            let dy = (f.yaw - b.yaw).abs();
            assert!(dy < 1e-9 || (PI - dy).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_box_axis_aligned_square() {
        let quad = [(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)];
        let b = fit_box_from_quad(&quad).unwrap();
        assert!(close(b.cx, 0.0, 1e-12) && close(b.cy, 0.0, 1e-12));
        assert!(close(b.length, 1.0, 1e-12) && close(b.width, 1.0, 1e-12));
        assert!(close(b.yaw, 0.0, 1e-12));
    }

    #[test]
    fn fit_box_symmetric_noise_keeps_center() {
        let b = RotatedBoxBEV::new(1.0, -2.0, 2.0, 1.0, 0.4);
        let c = b.corners();
        // Perturb opposite corners by +-eps along x: the mean cancels.
        let eps = 0.01;
        let quad = [
            (c[0].0 + eps, c[0].1),
            (c[1].0, c[1].1),
            (c[2].0 - eps, c[2].1),
            (c[3].0, c[3].1),
        ];
        let f = fit_box_from_quad(&quad).unwrap();
        assert!(close(f.cx, 1.0, 1e-12));
        assert!(close(f.cy, -2.0, 1e-12));
    }

    #[test]
    fn fit_box_rejects_self_intersection() {
        // Bowtie ordering.
        let quad = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(fit_box_from_quad(&quad).is_err());
    }
}
