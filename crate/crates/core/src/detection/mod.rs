//! Set-prediction detection: heads, bipartite matching and the composite
//! loss.

mod heads;
mod loss;
mod matching;

pub use heads::{BoxCoder, DetectionHead, HeadConfig, HeadMode, HeadOutput};
pub use loss::{
    corner_loss, corner_terms, focal_element, focal_loss, focal_terms, laplace_kl, laplace_kl_angle,
    laplace_kl_grad,
    loss_on_tape, regression_terms, total_loss, LossBreakdown, LossConfig, LossTargets,
};
pub use matching::{assignment_cost, build_cost_matrix, hungarian, match_predictions, Assignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, wrap_angle, Box2D, Box3D, Overlap};

/// Box parameterisations the heads can emit.
pub trait BoxParams: Copy + Overlap {
    /// Number of regression fields `O`.
    const DIM: usize;
    /// Column ranges of the centre, size and (optional) heading groups.
    const CENTER: std::ops::Range<usize>;
    const SIZE: std::ops::Range<usize>;
    const HEADING: Option<usize>;

    fn params(&self) -> Vec<f64>;
    fn from_params(p: &[f64]) -> Result<Self>;
}

impl BoxParams for Box3D {
    const DIM: usize = 7;
    const CENTER: std::ops::Range<usize> = 0..3;
    const SIZE: std::ops::Range<usize> = 3..6;
    const HEADING: Option<usize> = Some(6);

    fn params(&self) -> Vec<f64> {
        self.to_array().to_vec()
    }

    fn from_params(p: &[f64]) -> Result<Self> {
        let a: [f64; 7] = p
            .try_into()
            .map_err(|_| Error::Contract(format!("3D box needs 7 fields, got {}", p.len())))?;
        Box3D::from_array(a)
    }
}

impl BoxParams for Box2D {
    const DIM: usize = 4;
    const CENTER: std::ops::Range<usize> = 0..2;
    const SIZE: std::ops::Range<usize> = 2..4;
    const HEADING: Option<usize> = None;

    fn params(&self) -> Vec<f64> {
        self.to_array().to_vec()
    }

    fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() != 4 {
            return Err(Error::Contract(format!("2D box needs 4 fields, got {}", p.len())));
        }
        Box2D::new(p[0], p[1], p[2], p[3])
    }
}

/// Per-field difference used by matching and regression; headings wrap.
pub fn param_delta<B: BoxParams>(pred: &[f64], gt: &[f64], k: usize) -> f64 {
    let d = pred[k] - gt[k];
    if B::HEADING == Some(k) {
        wrap_angle(d)
    } else {
        d
    }
}

/// `N` predicted boxes with class probabilities over `C + 1` classes; the
/// last column is "no object".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet<B = Box3D> {
    pub boxes: Vec<B>,
    pub class_probs: Vec<Vec<f64>>,
}

impl<B: BoxParams> DetectionSet<B> {
    pub fn new(boxes: Vec<B>, class_probs: Vec<Vec<f64>>) -> Result<Self> {
        if boxes.len() != class_probs.len() {
            return Err(Error::Contract(format!(
                "{} boxes but {} probability rows",
                boxes.len(),
                class_probs.len()
            )));
        }
        for row in &class_probs {
            let s: f64 = row.iter().sum();
            if row.len() < 2 || row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("invalid probability row {row:?}")));
            }
        }
        Ok(Self { boxes, class_probs })
    }

    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            class_probs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.first().map_or(0, |r| r.len() - 1)
    }

    /// Best object class (excluding "no object") and its probability.
    pub fn best_class(&self, i: usize) -> (usize, f64) {
        let row = &self.class_probs[i];
        let mut best = (0, row[0]);
        for (c, &p) in row.iter().enumerate().take(row.len() - 1) {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.best_class(i).1
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
            class_probs: idx.iter().map(|&i| self.class_probs[i].clone()).collect(),
        }
    }

    /// Greedy suppression over all detections at once.
    pub fn nms(&self, iou_threshold: f64, max_out: usize) -> Self {
        let scores: Vec<f64> = (0..self.len()).map(|i| self.confidence(i)).collect();
        self.select(&nms(&self.boxes, &scores, iou_threshold, max_out))
    }

    /// Suppression within each predicted class, merged by confidence and
    /// truncated to `max_out`.
    pub fn nms_per_class(&self, iou_threshold: f64, max_out: usize) -> Self {
        let mut kept = Vec::new();
        for c in 0..self.num_classes() {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.best_class(i).0 == c).collect();
            let boxes: Vec<B> = idx.iter().map(|&i| self.boxes[i]).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| self.confidence(i)).collect();
            kept.extend(nms(&boxes, &scores, iou_threshold, max_out).into_iter().map(|k| idx[k]));
        }
        kept.sort_by(|&a, &b| self.confidence(b).total_cmp(&self.confidence(a)).then(a.cmp(&b)));
        kept.truncate(max_out);
        self.select(&kept)
    }
}

/// Ground-truth boxes with class indices in `0..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<B = Box3D> {
    pub boxes: Vec<B>,
    pub labels: Vec<usize>,
}

impl<B> GroundTruth<B> {
    pub fn new(boxes: Vec<B>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::Contract("ground-truth boxes and labels differ in length".into()));
        }
        Ok(Self { boxes, labels })
    }

    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// One-hot label row over `num_classes` classes.
    pub fn one_hot(&self, i: usize, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[self.labels[i]] = 1.0;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box3D {
        Box3D::new(x, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0).unwrap()
    }

    #[test]
    fn probability_rows_are_validated() {
        assert!(DetectionSet::new(vec![b(0.0)], vec![vec![0.5, 0.6, 0.0]]).is_err());
        assert!(DetectionSet::new(vec![b(0.0)], vec![vec![0.2, 0.3, 0.5]]).is_ok());
        assert!(DetectionSet::<Box3D>::new(vec![b(0.0)], vec![]).is_err());
    }

    #[test]
    fn confidence_excludes_no_object() {
        let d = DetectionSet::new(vec![b(0.0)], vec![vec![0.1, 0.3, 0.6]]).unwrap();
        assert_eq!(d.best_class(0), (1, 0.3));
    }

    #[test]
    fn per_class_nms_keeps_overlapping_boxes_of_different_classes() {
        let d = DetectionSet::new(
            vec![b(0.0), b(0.1), b(0.2)],
            vec![vec![0.9, 0.05, 0.05], vec![0.8, 0.1, 0.1], vec![0.1, 0.7, 0.2]],
        )
        .unwrap();
        let k = d.nms_per_class(0.3, 256);
        assert_eq!(k.len(), 2);
        assert_eq!(k.boxes[0], b(0.0));
        assert_eq!(k.boxes[1], b(0.2));
        assert_eq!(d.nms(0.3, 256).len(), 1);
        assert_eq!(d.nms_per_class(0.3, 1).len(), 1);
    }

    #[test]
    fn one_hot_labels() {
        let g = GroundTruth::new(vec![b(0.0)], vec![1]).unwrap();
        assert_eq!(g.one_hot(0, 3), vec![0.0, 1.0, 0.0]);
    }
}
