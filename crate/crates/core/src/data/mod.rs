//! Scene data: synthetic generation, KITTI-format files and training-time
//! augmentation.

mod augment;
mod calib;
mod kitti;
mod synth;

pub use augment::{augment_scene, AugmentConfig};
pub use calib::{inverse3, Calibration};
pub use kitti::{
    load_kitti, load_kitti_dir, parse_calibration, parse_labels, read_points, write_calibration, write_kitti_dir,
    write_labels, write_points, KittiLabel, KittiPaths,
};
pub use synth::{generate_scene, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::camera::ImageTensor;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{corners_unchecked, Box2D, Box3D};
use crate::lidar::PointCloud;

/// Points within this distance outside a box still count as inside it.
pub const CONTAINMENT_MARGIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Vehicle, ObjectClass::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }

    pub fn kitti_name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
        }
    }

    pub fn from_kitti(name: &str) -> Option<Self> {
        match name {
            "Car" => Some(ObjectClass::Vehicle),
            "Pedestrian" => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            ObjectClass::Vehicle => [210, 45, 40],
            ObjectClass::Pedestrian => [40, 70, 225],
        }
    }
}

/// A paired camera image and point cloud with lidar-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub image: ImageTensor,
    pub cloud: PointCloud,
    pub calibration: Calibration,
    pub gt: GroundTruth<Box3D>,
    /// Set when the generator placed fewer boxes than requested.
    pub placement_shortfall: bool,
}

impl SceneSample {
    pub fn points_in_box(&self, b: &Box3D) -> usize {
        self.cloud
            .points
            .iter()
            .filter(|p| b.contains(**p, CONTAINMENT_MARGIN))
            .count()
    }

    /// Checks that every box holds a point and lies inside the range.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.gt.boxes.iter().enumerate() {
            if !self.cloud.range.contains(b.center()) {
                return Err(Error::Contract(format!("{}: box {i} outside the range", self.scene_id)));
            }
            if self.points_in_box(b) == 0 {
                return Err(Error::Contract(format!("{}: box {i} holds no point", self.scene_id)));
            }
        }
        Ok(())
    }

    /// Image-plane boxes of the ground truth, clipped to the image. Boxes
    /// with a corner behind the camera or under `min_area` pixels after
    /// clipping are dropped.
    pub fn gt_2d(&self, min_area: f64) -> GroundTruth<Box2D> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for (b, &label) in self.gt.boxes.iter().zip(&self.gt.labels) {
            let Some(r) = project_box(&self.calibration, b) else {
                continue;
            };
            let (x1, y1) = (r[0].max(0.0), r[1].max(0.0));
            let (x2, y2) = (r[2].min(w), r[3].min(h));
            if x2 <= x1 || y2 <= y1 || (x2 - x1) * (y2 - y1) < min_area {
                continue;
            }
            if let Ok(b2) = Box2D::from_corners(x1, y1, x2, y2) {
                boxes.push(b2);
                labels.push(label);
            }
        }
        GroundTruth { boxes, labels }
    }
}

/// Pixel bounds `[x1, y1, x2, y2]` of a box's projected corners, or `None`
/// when a corner lies behind the camera.
pub fn project_box(calib: &Calibration, b: &Box3D) -> Option<[f64; 4]> {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in corners_unchecked(&b.to_array()).0 {
        let [u, v, _] = calib.project(c)?;
        r = [r[0].min(u), r[1].min(v), r[2].max(u), r[3].max(v)];
    }
    Some(r)
}

/// An ordered collection of scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// `count` synthetic scenes with seeds `seed, seed + 1, …`.
    pub fn synthetic(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| generate_scene(cfg, seed.wrapping_add(i)))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A seed-determined subset holding `fraction` of the scenes (rounded
    /// up), in the original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Self {
        use rand::seq::index;
        use rand::SeedableRng;
        let keep = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.len(), keep).into_vec();
        idx.sort_unstable();
        Self {
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }
}
