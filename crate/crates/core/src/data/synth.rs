use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{Calibration, ObjectClass, SceneSample, CONTAINMENT_MARGIN};
use crate::camera::ImageTensor;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{bev_intersection, corners_unchecked, Box3D};
use crate::lidar::{PointCloud, Range3};

const PLACEMENT_TRIALS: usize = 1000;
/// Clearance kept between placed footprints.
const FOOTPRINT_GAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive box-count ranges per class.
    pub vehicles: [usize; 2],
    pub pedestrians: [usize; 2],
    /// Mean `(l, w, h)` in metres.
    pub vehicle_size: [f64; 3],
    pub pedestrian_size: [f64; 3],
    /// Relative uniform jitter on each extent.
    pub size_jitter: f64,
    /// Surface points per square metre at or under `falloff_distance`.
    pub surface_density: f64,
    /// Beyond this distance the density falls with the squared distance.
    pub falloff_distance: f64,
    pub min_points_per_box: usize,
    pub clutter_points: usize,
    pub ground_z: f64,
    pub range: Range3,
    /// Smallest forward distance of a box centre.
    pub min_forward: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    /// Standard deviation of surface-point jitter, clamped to the
    /// containment margin.
    pub point_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vehicles: [2, 6],
            pedestrians: [0, 4],
            vehicle_size: [3.9, 1.6, 1.56],
            pedestrian_size: [0.8, 0.66, 1.76],
            size_jitter: 0.1,
            surface_density: 10.0,
            falloff_distance: 15.0,
            min_points_per_box: 5,
            clutter_points: 2000,
            ground_z: -1.7,
            range: Range3::KITTI,
            min_forward: 5.0,
            image_width: 384,
            image_height: 128,
            focal: 192.0,
            point_noise: 0.005,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small scenes for fast tests and the desk-scale training runs.
    pub fn toy() -> Self {
        Self {
            vehicles: [1, 2],
            pedestrians: [0, 1],
            surface_density: 4.0,
            clutter_points: 40,
            range: Range3 {
                min: [0.0, -16.0, -3.0],
                max: [32.0, 16.0, 1.0],
            },
            min_forward: 5.0,
            image_width: 64,
            image_height: 32,
            focal: 32.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if !(self.surface_density > 0.0) || !(self.falloff_distance > 0.0) {
            return bad("densities must be positive");
        }
        if self.vehicles[0] > self.vehicles[1] || self.pedestrians[0] > self.pedestrians[1] {
            return bad("count ranges must be ordered");
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if self.vehicle_size.iter().chain(&self.pedestrian_size).any(|&s| !(s > 0.0)) {
            return bad("size priors must be positive");
        }
        if !(0.0..1.0).contains(&self.size_jitter) || self.point_noise < 0.0 {
            return bad("jitter must lie in [0, 1) and noise must be non-negative");
        }
        if !(self.range.min[2] <= self.ground_z && self.ground_z < self.range.max[2]) {
            return bad("ground plane outside the vertical range");
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration::forward_pinhole(self.focal, self.image_width, self.image_height)
    }
}

fn to_f32_grid(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| f64::from(v as f32))
}

fn place_boxes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Box3D>, Vec<usize>, bool) {
    let mut classes = Vec::new();
    for (class, [lo, hi]) in [(ObjectClass::Vehicle, cfg.vehicles), (ObjectClass::Pedestrian, cfg.pedestrians)] {
        let n = rng.random_range(lo..=hi);
        classes.extend(std::iter::repeat_n(class, n));
    }
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut labels = Vec::new();
    let mut shortfall = false;
    for class in classes {
        let prior = match class {
            ObjectClass::Vehicle => cfg.vehicle_size,
            ObjectClass::Pedestrian => cfg.pedestrian_size,
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIALS {
            let [l, w, h] = prior.map(|s| s * (1.0 + rng.random_range(-cfg.size_jitter..=cfg.size_jitter)));
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let reach = 0.5 * l.hypot(w) + CONTAINMENT_MARGIN;
            let (x0, x1) = (cfg.range.min[0].max(cfg.min_forward) + reach, cfg.range.max[0] - reach);
            let (y0, y1) = (cfg.range.min[1] + reach, cfg.range.max[1] - reach);
            if x0 >= x1 || y0 >= y1 {
                break;
            }
            let cx = rng.random_range(x0..x1);
            let cy = rng.random_range(y0..y1);
            let Ok(b) = Box3D::new(cx, cy, cfg.ground_z + 0.5 * h, l, w, h, theta) else {
                continue;
            };
            if b.z_max() + CONTAINMENT_MARGIN >= cfg.range.max[2] {
                continue;
            }
            let grown = Box3D {
                l: l + FOOTPRINT_GAP,
                w: w + FOOTPRINT_GAP,
                ..b
            };
            if boxes.iter().all(|o| bev_intersection(&grown, o) == 0.0) {
                boxes.push(b);
                labels.push(class.index());
                placed = true;
                break;
            }
        }
        if !placed {
            shortfall = true;
        }
    }
    (boxes, labels, shortfall)
}

/// Uniform samples on the six faces of `b`, jittered by at most the
/// containment margin.
fn surface_points(cfg: &SynthConfig, b: &Box3D, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let areas = [b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h, b.l * b.w, b.l * b.w];
    let total: f64 = areas.iter().sum();
    let dist = b.cx.hypot(b.cy).max(1e-3);
    let falloff = (cfg.falloff_distance / dist).powi(2).min(1.0);
    let n = ((cfg.surface_density * total * falloff).round() as usize).max(cfg.min_points_per_box.max(1));
    let faces = WeightedIndex::new(areas).expect("box faces have positive area");
    let noise = Normal::new(0.0, cfg.point_noise.max(1e-12)).expect("finite noise");
    let clamp = 0.9 * CONTAINMENT_MARGIN;
    let (s, c) = b.theta.sin_cos();
    (0..n)
        .map(|_| {
            let f = faces.sample(rng);
            let axis = f / 2;
            let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
            let mut local = [0.0; 3];
            for k in 0..3 {
                local[k] = if k == axis {
                    sign * half[k]
                } else {
                    rng.random_range(-half[k]..=half[k])
                };
                if cfg.point_noise > 0.0 {
                    local[k] += noise.sample(rng).clamp(-clamp, clamp);
                }
            }
            to_f32_grid([
                b.cx + c * local[0] - s * local[1],
                b.cy + s * local[0] + c * local[1],
                b.cz + local[2],
            ])
        })
        .collect()
}

fn ground_clutter(cfg: &SynthConfig, boxes: &[Box3D], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let noise = Normal::new(0.0, 0.03).expect("finite noise");
    let r = &cfg.range;
    let mut out = Vec::with_capacity(cfg.clutter_points);
    for _ in 0..cfg.clutter_points {
        let p = to_f32_grid([
            rng.random_range(r.min[0]..r.max[0]),
            rng.random_range(r.min[1]..r.max[1]),
            cfg.ground_z + Distribution::<f64>::sample(&noise, rng).clamp(-0.1, 0.1),
        ]);
        if r.contains(p) && !boxes.iter().any(|b| b.contains(p, 0.05)) {
            out.push(p);
        }
    }
    out
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    poly.len() >= 3
        && (0..poly.len()).all(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
}

fn render_image(cfg: &SynthConfig, calib: &Calibration, boxes: &[Box3D], labels: &[usize], rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (cfg.image_width as u32, cfg.image_height as u32);
    let horizon = calib.p2[1][2];
    let mut img = RgbImage::from_fn(w, h, |_, y| {
        if f64::from(y) + 0.5 < horizon {
            Rgb([150, 190, 235])
        } else {
            Rgb([105, 105, 100])
        }
    });
    for p in img.pixels_mut() {
        let n: i16 = rng.random_range(-12..=12);
        p.0 = p.0.map(|c| (i16::from(c) + n).clamp(0, 255) as u8);
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let da = boxes[a].cx.hypot(boxes[a].cy);
        let db = boxes[b].cx.hypot(boxes[b].cy);
        db.total_cmp(&da).then(a.cmp(&b))
    });
    for i in order {
        let projected: Option<Vec<[f64; 2]>> = corners_unchecked(&boxes[i].to_array())
            .0
            .iter()
            .map(|&c| calib.project(c).map(|q| [q[0], q[1]]))
            .collect();
        let Some(projected) = projected else { continue };
        let hull = convex_hull(projected);
        let color = ObjectClass::from_index(labels[i]).map_or([255, 255, 255], ObjectClass::color);
        for y in 0..h {
            for x in 0..w {
                if inside_convex(&hull, [f64::from(x) + 0.5, f64::from(y) + 0.5]) {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    img
}

/// A deterministic scene for `(cfg.seed, seed)`.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cfg.seed);
    let (boxes, labels, shortfall) = place_boxes(cfg, &mut rng);
    if shortfall {
        log::warn!("scene {seed}: could not place every requested box");
    }
    let mut points = Vec::new();
    for b in &boxes {
        points.extend(surface_points(cfg, b, &mut rng));
    }
    points.extend(ground_clutter(cfg, &boxes, &mut rng));
    let calibration = cfg.calibration();
    let img = render_image(cfg, &calibration, &boxes, &labels, &mut rng);
    Ok(SceneSample {
        scene_id: format!("synth-{:x}-{seed:06}", cfg.seed),
        image: ImageTensor::from_rgb8(&img, 1, 1),
        cloud: PointCloud::new(points, cfg.range),
        calibration,
        gt: GroundTruth::new(boxes, labels)?,
        placement_shortfall: shortfall,
    })
}
