//! Detection metrics: greedy TP/FP assignment, interpolated AP and the
//! heading-weighted APH.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::{DetectionSet, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, wrap_angle, Box3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    Bev,
    ThreeD,
}

impl OverlapKind {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            OverlapKind::Bev => iou_bev(a, b),
            OverlapKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OverlapKind::Bev => "BEV",
            OverlapKind::ThreeD => "3D",
        }
    }
}

/// Ground truth with fewer in-box points than `min_points` is ignored in
/// this bin: it neither counts as a miss nor turns a detection into a
/// false positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBin {
    pub name: String,
    pub min_points: usize,
}

impl DifficultyBin {
    pub fn standard() -> Vec<Self> {
        [("easy", 100), ("moderate", 30), ("hard", 10), ("overall", 0)]
            .into_iter()
            .map(|(n, m)| Self {
                name: n.to_string(),
                min_points: m,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    /// Class names, indexed like the labels.
    pub class_names: Vec<String>,
    /// Matching IoU per class.
    pub iou: Vec<f64>,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub recall_points: usize,
    pub difficulties: Vec<DifficultyBin>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            class_names: vec!["vehicle".into(), "pedestrian".into()],
            iou: vec![0.7, 0.5],
            nms_iou: 0.3,
            max_detections: 256,
            recall_points: 40,
            difficulties: DifficultyBin::standard(),
        }
    }
}

impl EvalThresholds {
    /// The same matching IoU for every class.
    pub fn uniform(iou: f64) -> Self {
        let d = Self::default();
        Self {
            iou: vec![iou; d.class_names.len()],
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.iou.len() {
            return Err(Error::Config("one IoU threshold per class is required".into()));
        }
        if self.recall_points == 0 || self.difficulties.is_empty() {
            return Err(Error::Config("need at least one recall point and one difficulty bin".into()));
        }
        Ok(())
    }
}

/// One scene's post-suppression detections with its ground truth and the
/// number of points inside each ground-truth box.
#[derive(Clone, Debug)]
pub struct SceneResult {
    pub detections: DetectionSet<Box3D>,
    pub gt: GroundTruth<Box3D>,
    pub gt_points: Vec<usize>,
}

/// A scored detection after assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedHit {
    pub confidence: f64,
    pub true_positive: bool,
    /// `1 − |Δθ|/π` for true positives, 0 otherwise.
    pub heading_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub ap: f64,
    pub aph: f64,
    pub num_gt: usize,
    pub num_det: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Heading accuracy weight of a matched pair.
pub fn heading_weight(pred: f64, gt: f64) -> f64 {
    1.0 - wrap_angle(pred - gt).abs() / std::f64::consts::PI
}

/// Greedy assignment for one scene and class: detections in descending
/// confidence take the unmatched ground truth of highest IoU at or above
/// `iou_threshold`. Detections that land on ignored ground truth are
/// dropped from the ranking.
pub fn assign_scene(
    dets: &[(Box3D, f64)],
    gts: &[(Box3D, bool)],
    iou_threshold: f64,
    kind: OverlapKind,
) -> Vec<RankedHit> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for i in order {
        let (pb, conf) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gb, _)) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = kind.iou(&pb, gb);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                if gts[g].1 {
                    hits.push(RankedHit {
                        confidence: conf,
                        true_positive: true,
                        heading_weight: heading_weight(pb.theta, gts[g].0.theta),
                    });
                }
            }
            None => hits.push(RankedHit {
                confidence: conf,
                true_positive: false,
                heading_weight: 0.0,
            }),
        }
    }
    hits
}

/// Interpolated AP and APH from ranked hits pooled over scenes. Ties in
/// confidence keep the given order.
pub fn average_precision(hits: &[RankedHit], num_gt: usize, recall_points: usize) -> ApCell {
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| hits[b].confidence.total_cmp(&hits[a].confidence).then(a.cmp(&b)));
    let mut tp = 0.0;
    let mut tph = 0.0;
    let mut curve = Vec::with_capacity(hits.len());
    let mut heading_prec = Vec::with_capacity(hits.len());
    for (k, &i) in order.iter().enumerate() {
        if hits[i].true_positive {
            tp += 1.0;
            tph += hits[i].heading_weight;
        }
        let n = (k + 1) as f64;
        let recall = if num_gt == 0 { 0.0 } else { tp / num_gt as f64 };
        curve.push((recall, tp / n));
        heading_prec.push(tph / n);
    }
    let (mut ap, mut aph) = (0.0, 0.0);
    if num_gt > 0 {
        for r in 1..=recall_points {
            let r = r as f64 / recall_points as f64;
            let mut p = 0.0f64;
            let mut ph = 0.0f64;
            for (k, &(rec, prec)) in curve.iter().enumerate() {
                if rec >= r - 1e-12 {
                    p = p.max(prec);
                    ph = ph.max(heading_prec[k]);
                }
            }
            ap += p;
            aph += ph;
        }
        ap /= recall_points as f64;
        aph /= recall_points as f64;
    }
    ApCell {
        ap,
        aph,
        num_gt,
        num_det: hits.len(),
        pr_curve: curve,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub class: String,
    pub difficulty: String,
    pub kind: OverlapKind,
    pub iou_threshold: f64,
    pub cell: ApCell,
}

/// Deterministic metric content of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub entries: Vec<EvalEntry>,
}

impl Metrics {
    pub fn entry(&self, class: &str, difficulty: &str, kind: OverlapKind) -> Option<&ApCell> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.difficulty == difficulty && e.kind == kind)
            .map(|e| &e.cell)
    }

    /// Mean AP over classes that have ground truth in the bin; `None` when
    /// no class has any.
    pub fn mean_ap(&self, difficulty: &str, kind: OverlapKind) -> Option<f64> {
        self.mean_of(difficulty, kind, |c| c.ap)
    }

    pub fn mean_aph(&self, difficulty: &str, kind: OverlapKind) -> Option<f64> {
        self.mean_of(difficulty, kind, |c| c.aph)
    }

    fn mean_of(&self, difficulty: &str, kind: OverlapKind, f: impl Fn(&ApCell) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.difficulty == difficulty && e.kind == kind && e.cell.num_gt > 0)
            .map(|e| f(&e.cell))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<10} {:<4} {:>5} {:>8} {:>8} {:>6} {:>6}", "class", "difficulty", "iou", "thr", "AP", "APH", "gt", "det");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:<4} {:>5.2} {:>8.4} {:>8.4} {:>6} {:>6}",
                e.class,
                e.difficulty,
                e.kind.label(),
                e.iou_threshold,
                e.cell.ap,
                e.cell.aph,
                e.cell.num_gt,
                e.cell.num_det
            );
        }
        let mut bins: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !bins.contains(&e.difficulty.as_str()) {
                bins.push(&e.difficulty);
            }
        }
        for kind in [OverlapKind::ThreeD, OverlapKind::Bev] {
            for b in &bins {
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    s,
                    "mAP_{} {b}: {}  mAPH: {}",
                    kind.label(),
                    fmt(self.mean_ap(b, kind)),
                    fmt(self.mean_aph(b, kind))
                );
            }
        }
        s
    }
}

/// AP and APH for every class, difficulty bin and overlap kind.
pub fn compute_metrics(scenes: &[SceneResult], th: &EvalThresholds) -> Result<Metrics> {
    th.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut entries = Vec::new();
    for kind in [OverlapKind::ThreeD, OverlapKind::Bev] {
        for (c, name) in th.class_names.iter().enumerate() {
            for bin in &th.difficulties {
                let mut hits = Vec::new();
                let mut num_gt = 0;
                for s in scenes {
                    let dets: Vec<(Box3D, f64)> = (0..s.detections.len())
                        .filter(|&i| s.detections.best_class(i).0 == c)
                        .map(|i| (s.detections.boxes[i], s.detections.confidence(i)))
                        .collect();
                    let gts: Vec<(Box3D, bool)> = (0..s.gt.len())
                        .filter(|&g| s.gt.labels[g] == c)
                        .map(|g| (s.gt.boxes[g], s.gt_points[g] >= bin.min_points))
                        .collect();
                    num_gt += gts.iter().filter(|g| g.1).count();
                    hits.extend(assign_scene(&dets, &gts, th.iou[c], kind));
                }
                entries.push(EvalEntry {
                    class: name.clone(),
                    difficulty: bin.name.clone(),
                    kind,
                    iou_threshold: th.iou[c],
                    cell: average_precision(&hits, num_gt, th.recall_points),
                });
            }
        }
    }
    Ok(Metrics { entries })
}
