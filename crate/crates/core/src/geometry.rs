//! Oriented boxes, their corners, overlap measures and non-maximum
//! suppression.
//!
//! Coordinates follow the lidar convention: `x` forward, `y` left, `z` up.
//! Headings are yaw angles about `z`, measured from `+x` towards `+y`, and
//! always stored wrapped to `[-π, π)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t >= PI {
        t -= two_pi;
    }
    if t < -PI {
        t += two_pi;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    /// Validates extents and wraps the heading.
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(p: [f64; 7]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.l) && ok(self.w) && ok(self.h)) {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.cz.is_finite() && self.theta.is_finite()) {
            return Err(Error::InvalidBox("non-finite centre or heading".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Bird's-eye footprint, counter-clockwise, matching corners 0..4.
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let mut out = [[0.0; 2]; 4];
        for (k, (sx, sy)) in BEV_SIGNS.iter().enumerate() {
            let (dx, dy) = (sx * 0.5 * self.l, sy * 0.5 * self.w);
            out[k] = [self.cx + c * dx - s * dy, self.cy + s * dx + c * dy];
        }
        out
    }

    /// Whether `p` lies inside the box grown by `margin` on every side.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy, dz) = (p[0] - self.cx, p[1] - self.cy, p[2] - self.cz);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.l + margin
            && ly.abs() <= 0.5 * self.w + margin
            && dz.abs() <= 0.5 * self.h + margin
    }
}

/// Axis-aligned image-space box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("2D extents must be positive, got w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

const BEV_SIGNS: [(f64, f64); 4] = [(1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)];

/// Box-frame sign pattern of each corner as `(±l/2, ±w/2, ±h/2)`.
///
/// Corners 0..4 are the bottom face (`-h/2`) counter-clockwise seen from
/// above, starting at front-right; corners 4..8 repeat that order on the top
/// face. The edge 3→0 points along the heading and 0→1 along `+w`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

/// The eight corners of a box in [`CORNER_SIGNS`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerSet(pub [[f64; 3]; 8]);

impl CornerSet {
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.0 {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / 8.0)
    }
}

pub fn corners_of(b: &Box3D) -> Result<CornerSet> {
    b.validate()?;
    Ok(corners_unchecked(&b.to_array()))
}

/// Corner positions for raw parameters `(cx, cy, cz, l, w, h, θ)` without
/// validating extents. Used by the loss, which must stay defined on any
/// decoded prediction.
pub fn corners_unchecked(p: &[f64; 7]) -> CornerSet {
    let (s, c) = p[6].sin_cos();
    let mut out = [[0.0; 3]; 8];
    for (k, sg) in CORNER_SIGNS.iter().enumerate() {
        let dx = sg[0] * 0.5 * p[3];
        let dy = sg[1] * 0.5 * p[4];
        let dz = sg[2] * 0.5 * p[5];
        out[k] = [p[0] + c * dx - s * dy, p[1] + s * dx + c * dy, p[2] + dz];
    }
    CornerSet(out)
}

/// Inverse of [`corners_of`] for a well-formed corner set.
pub fn box_from_corners(cs: &CornerSet) -> Result<Box3D> {
    let c = cs.centroid();
    let p = &cs.0;
    let dist = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let l = dist(p[3], p[0]);
    let w = dist(p[0], p[1]);
    let h = dist(p[0], p[4]);
    let theta = (p[0][1] - p[3][1]).atan2(p[0][0] - p[3][0]);
    Box3D::new(c[0], c[1], c[2], l, w, h, theta)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

/// Sutherland–Hodgman clipping of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let mut input = Vec::with_capacity(subject.len() + clip.len());
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::EPSILON {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Exact footprint intersection area.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    // cheap reject on circumscribed circles
    let ra = 0.5 * (a.l.hypot(a.w));
    let rb = 0.5 * (b.l.hypot(b.w));
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let zo = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if zo == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * zo;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Overlap measure used by [`nms`].
pub trait Overlap {
    fn overlap(&self, other: &Self) -> f64;
}

impl Overlap for Box3D {
    fn overlap(&self, other: &Self) -> f64 {
        iou_3d(self, other)
    }
}

impl Overlap for Box2D {
    fn overlap(&self, other: &Self) -> f64 {
        iou_2d(self, other)
    }
}

/// Order of candidates for greedy suppression: confidence descending, then
/// input index ascending.
pub fn confidence_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. Returns indices of the survivors in
/// confidence order; every kept pair overlaps by at most `iou_threshold`.
pub fn nms<B: Overlap>(boxes: &[B], scores: &[f64], iou_threshold: f64, max_out: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let order = confidence_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if keep.len() >= max_out {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].overlap(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, t: f64) -> Box3D {
        Box3D::new(cx, cy, cz, l, w, h, t).unwrap()
    }

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for k in -20..20 {
            let t = wrap_angle(0.3 + k as f64 * 2.0 * PI);
            assert!((t - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_cube_corners() {
        let cs = corners_of(&bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)).unwrap();
        for (p, s) in cs.0.iter().zip(CORNER_SIGNS) {
            assert_eq!(*p, s.map(|v| 0.5 * v));
        }
    }

    #[test]
    fn quarter_turn_maps_corner_by_hand() {
        // (1, 0.5, 0.5) is the (+l, +w, +h) corner, index 5.
        let cs = corners_of(&bx(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, PI / 2.0)).unwrap();
        let p = cs.0[5];
        assert!((p[0] + 0.5).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && (p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_extent_is_rejected() {
        assert!(matches!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0), Err(Error::InvalidBox(_))));
        let bad = Box3D { cx: 0.0, cy: 0.0, cz: 0.0, l: 1.0, w: -1.0, h: 1.0, theta: 0.0 };
        assert!(corners_of(&bad).is_err());
        assert!(Box2D::new(0.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn identical_and_disjoint_iou() {
        let a = bx(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.7);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        let b = bx(101.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.7);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn offset_unit_cubes_have_closed_form_iou() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_2d_axis_aligned() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = Box2D::new(1.0, 0.0, 2.0, 2.0).unwrap();
        assert!((iou_2d(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_higher_of_duplicates() {
        let a = bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.3, 256), vec![1]);
        assert_eq!(nms(&[a], &[0.1], 0.3, 256), vec![0]);
        assert!(nms::<Box3D>(&[], &[], 0.3, 256).is_empty());
    }

    #[test]
    fn nms_tie_breaks_by_index() {
        let a = bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let b = bx(50.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(nms(&[a, b, a], &[0.5, 0.5, 0.5], 0.3, 256), vec![0, 1]);
        assert_eq!(nms(&[a, b], &[0.5, 0.5], 0.3, 1), vec![0]);
    }
}
