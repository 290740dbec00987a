use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use crate::data::{Calibration, ObjectClass, SceneSample};
use crate::detection::DetectionSet;
use crate::error::Result;
use crate::geometry::{corners_unchecked, Box3D};
use crate::metrics::EvalThresholds;
use crate::model::Model;

const BEV_PIXELS_PER_METRE: f64 = 10.0;
const CAMERA_MIN_WIDTH: u32 = 512;
const GT_COLOR: Rgb<u8> = Rgb([60, 220, 90]);
const POINT_COLOR: Rgb<u8> = Rgb([170, 170, 170]);
const BACKGROUND: Rgb<u8> = Rgb([16, 16, 24]);

const BOTTOM: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub bev: PathBuf,
    pub camera: PathBuf,
    pub gt_drawn: usize,
    pub predictions_drawn: usize,
}

fn prediction_color(class: usize) -> Rgb<u8> {
    Rgb(ObjectClass::from_index(class).map_or([240, 200, 40], |c| c.color()))
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    // Bound the walk so wildly off-screen boxes cannot stall the renderer.
    for _ in 0..=(dx - dy).min(4 * (w + h)) {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Top-down view: x forward points up the image, y left points left.
pub fn render_bev(sample: &SceneSample, dets: &DetectionSet<Box3D>) -> RgbImage {
    let r = &sample.cloud.range;
    let k = BEV_PIXELS_PER_METRE;
    let width = ((r.max[1] - r.min[1]) * k).ceil().max(1.0) as u32;
    let height = ((r.max[0] - r.min[0]) * k).ceil().max(1.0) as u32;
    let to_px = |p: [f64; 3]| ((r.max[1] - p[1]) * k, (r.max[0] - p[0]) * k);
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for p in &sample.cloud.points {
        let (u, v) = to_px(*p);
        if u >= 0.0 && v >= 0.0 && (u as u32) < width && (v as u32) < height {
            img.put_pixel(u as u32, v as u32, POINT_COLOR);
        }
    }
    let draw_box = |img: &mut RgbImage, b: &Box3D, color: Rgb<u8>| {
        let c = corners_unchecked(&b.to_array()).0;
        for (i, j) in BOTTOM {
            draw_line(img, to_px(c[i]), to_px(c[j]), color);
        }
        let front = [0.5 * (c[0][0] + c[1][0]), 0.5 * (c[0][1] + c[1][1]), 0.0];
        draw_line(img, to_px(b.center()), to_px(front), color);
    };
    for b in &sample.gt.boxes {
        draw_box(&mut img, b, GT_COLOR);
    }
    for (i, b) in dets.boxes.iter().enumerate() {
        draw_box(&mut img, b, prediction_color(dets.best_class(i).0));
    }
    img
}

fn projected_edges(calib: &Calibration, b: &Box3D, scale: f64) -> Option<Vec<((f64, f64), (f64, f64))>> {
    let c = corners_unchecked(&b.to_array()).0;
    let mut px = [(0.0, 0.0); 8];
    for (k, p) in c.iter().enumerate() {
        let [u, v, _] = calib.project(*p)?;
        px[k] = (u * scale, v * scale);
    }
    Some(EDGES.iter().map(|&(i, j)| (px[i], px[j])).collect())
}

/// The camera image, upscaled for legibility, with projected box edges.
/// Boxes with a corner behind the camera are skipped.
pub fn render_camera(sample: &SceneSample, dets: &DetectionSet<Box3D>) -> RgbImage {
    let base = sample.image.to_rgb8();
    let scale = (CAMERA_MIN_WIDTH / base.width().max(1)).max(1);
    let mut img = imageops::resize(&base, base.width() * scale, base.height() * scale, imageops::FilterType::Nearest);
    let s = scale as f64;
    let items = sample
        .gt
        .boxes
        .iter()
        .map(|b| (b, GT_COLOR))
        .chain(dets.boxes.iter().enumerate().map(|(i, b)| (b, prediction_color(dets.best_class(i).0))));
    for (b, color) in items {
        if let Some(edges) = projected_edges(&sample.calibration, b, s) {
            for (a, e) in edges {
                draw_line(&mut img, a, e, color);
            }
        }
    }
    img
}

/// Writes `<stem>_bev.png` and `<stem>_camera.png` into `dir`.
pub fn render_detections(sample: &SceneSample, dets: &DetectionSet<Box3D>, dir: &Path, stem: &str) -> Result<RenderOutput> {
    std::fs::create_dir_all(dir)?;
    let bev = dir.join(format!("{stem}_bev.png"));
    let camera = dir.join(format!("{stem}_camera.png"));
    render_bev(sample, dets).save(&bev)?;
    render_camera(sample, dets).save(&camera)?;
    Ok(RenderOutput {
        bev,
        camera,
        gt_drawn: sample.gt.len(),
        predictions_drawn: dets.len(),
    })
}

/// Runs the detector on one scene and renders its post-suppression output.
pub fn render_scene(model: &Model, sample: &SceneSample, th: &EvalThresholds, dir: &Path) -> Result<RenderOutput> {
    let dets = model.detect(sample, th.nms_iou, th.max_detections)?;
    render_detections(sample, &dets, dir, &sample.scene_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SynthConfig};

    fn count(img: &RgbImage, c: Rgb<u8>) -> usize {
        img.pixels().filter(|p| **p == c).count()
    }

    #[test]
    fn empty_predictions_draw_only_ground_truth() {
        let s = generate_scene(&SynthConfig::toy(), 3).unwrap();
        let img = render_bev(&s, &DetectionSet::empty());
        assert!(count(&img, GT_COLOR) > 0);
        for c in ObjectClass::ALL {
            assert_eq!(count(&img, Rgb(c.color())), 0);
        }
    }

    #[test]
    fn predictions_use_class_colours() {
        let s = generate_scene(&SynthConfig::toy(), 3).unwrap();
        let probs = (0..s.gt.len()).map(|i| s.gt.one_hot(i, 3)).collect();
        let mut shifted = s.gt.boxes.clone();
        for b in &mut shifted {
            b.cx += 0.5;
        }
        let dets = DetectionSet::new(shifted, probs).unwrap();
        let img = render_bev(&s, &dets);
        let c = ObjectClass::from_index(s.gt.labels[0]).unwrap().color();
        assert!(count(&img, Rgb(c)) > 0);
    }

    #[test]
    fn files_are_identical_across_reruns() {
        let s = generate_scene(&SynthConfig::toy(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = render_detections(&s, &DetectionSet::empty(), dir.path(), "a").unwrap();
        let b = render_detections(&s, &DetectionSet::empty(), dir.path(), "b").unwrap();
        assert_eq!(std::fs::read(&a.bev).unwrap(), std::fs::read(&b.bev).unwrap());
        assert_eq!(std::fs::read(&a.camera).unwrap(), std::fs::read(&b.camera).unwrap());
        assert_eq!(a.predictions_drawn, 0);
    }
}
