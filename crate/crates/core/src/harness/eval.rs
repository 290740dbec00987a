use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SceneSample};
use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::metrics::{compute_metrics, EvalThresholds, Metrics, OverlapKind, SceneResult};
use crate::model::Model;

/// Anything that turns a scene into post-suppression 3D detections.
pub trait Detector {
    fn detect(&self, sample: &SceneSample, th: &EvalThresholds) -> Result<DetectionSet<Box3D>>;
}

impl Detector for Model {
    fn detect(&self, sample: &SceneSample, th: &EvalThresholds) -> Result<DetectionSet<Box3D>> {
        Model::detect(self, sample, th.nms_iou, th.max_detections)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub scenes: usize,
    pub total_seconds: f64,
    pub mean_ms_per_scene: f64,
}

/// Metrics plus wall-clock statistics. Only `metrics` is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub runtime: RuntimeStats,
}

impl EvalReport {
    pub fn map_3d(&self, difficulty: &str) -> Option<f64> {
        self.metrics.mean_ap(difficulty, OverlapKind::ThreeD)
    }

    pub fn map_bev(&self, difficulty: &str) -> Option<f64> {
        self.metrics.mean_ap(difficulty, OverlapKind::Bev)
    }

    pub fn to_table(&self) -> String {
        format!(
            "{}scenes: {}  inference: {:.2} ms/scene\n",
            self.metrics.to_table(),
            self.runtime.scenes,
            self.runtime.mean_ms_per_scene
        )
    }
}

/// Runs the detector over every scene and scores the detections.
pub fn evaluate(det: &impl Detector, data: &Dataset, th: &EvalThresholds) -> Result<EvalReport> {
    th.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let mut scenes = Vec::with_capacity(data.len());
    for s in &data.samples {
        let detections = det.detect(s, th)?;
        scenes.push(SceneResult {
            detections,
            gt_points: s.gt.boxes.iter().map(|b| s.points_in_box(b)).collect(),
            gt: s.gt.clone(),
        });
    }
    let total = start.elapsed().as_secs_f64();
    Ok(EvalReport {
        metrics: compute_metrics(&scenes, th)?,
        runtime: RuntimeStats {
            scenes: data.len(),
            total_seconds: total,
            mean_ms_per_scene: 1e3 * total / data.len() as f64,
        },
    })
}
