use serde::{Deserialize, Serialize};

use super::{param_delta, Assignment, BoxParams, DetectionSet, GroundTruth, HeadOutput};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D, CORNER_SIGNS};
use crate::nn::Forward;
use crate::tensor::Matrix;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub corner_weight: f64,
    pub gamma: f64,
    pub laplace_scale: f64,
    /// Weight of prediction rows whose target is "no object".
    pub no_object_weight: f64,
    /// Take the smaller corner distance over the heading and its flip.
    pub corner_flip: bool,
    pub match_class_weight: f64,
    pub match_box_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            reg_weight: 1.0,
            corner_weight: 0.1,
            gamma: 2.0,
            laplace_scale: 1.0,
            no_object_weight: 0.1,
            corner_flip: false,
            match_class_weight: 1.0,
            match_box_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.laplace_scale > 0.0) {
            return Err(Error::Config(format!(
                "Laplace scale must be positive, got {}",
                self.laplace_scale
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be non-negative, got {}", self.gamma)));
        }
        let w = [
            self.cls_weight,
            self.reg_weight,
            self.corner_weight,
            self.no_object_weight,
            self.match_class_weight,
            self.match_box_weight,
        ];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub center: f64,
    pub size: f64,
    pub heading: f64,
    pub corner: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub corner_weight: f64,
}

impl LossBreakdown {
    fn compose(cls: f64, center: f64, size: f64, heading: f64, corner: f64, cfg: &LossConfig) -> Self {
        let total = cfg.cls_weight * cls + cfg.reg_weight * (center + size + heading + cfg.corner_weight * corner);
        Self {
            total,
            cls,
            center,
            size,
            heading,
            corner,
            cls_weight: cfg.cls_weight,
            reg_weight: cfg.reg_weight,
            corner_weight: cfg.corner_weight,
        }
    }
}

/// One focal term and its derivative with respect to the probability.
/// Probabilities are clamped to `[1e-7, 1 − 1e-7]`; the clamp has zero
/// derivative outside that interval.
pub fn focal_element(p: f64, target: f64, gamma: f64) -> (f64, f64) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - p;
    let (lp, lq) = (p.ln(), q.ln());
    let value = -(target * q.powf(gamma) * lp + (1.0 - target) * p.powf(gamma) * lq);
    if clamped {
        return (value, 0.0);
    }
    // d/dp of the positive and negative parts; the γ-prefixed factors are
    // dropped at γ = 0 to avoid 0·∞.
    let (dq, dp) = if gamma == 0.0 {
        (0.0, 0.0)
    } else {
        (gamma * q.powf(gamma - 1.0), gamma * p.powf(gamma - 1.0))
    };
    let pos = -dq * lp + q.powf(gamma) / p;
    let neg = dp * lq - p.powf(gamma) / q;
    (value, -(target * pos + (1.0 - target) * neg))
}

/// Unnormalised focal sum over paired probabilities and 0/1 targets.
pub fn focal_loss(probs: &[f64], targets: &[f64], gamma: f64) -> f64 {
    probs.iter().zip(targets).map(|(&p, &v)| focal_element(p, v, gamma).0).sum()
}

fn kl_of_delta(delta: f64, b: f64) -> f64 {
    let a = delta.abs() / b;
    (-a).exp() + a - 1.0
}

/// `KL(Laplace(gt, b) ‖ Laplace(pred, b))` for one scalar.
pub fn laplace_kl(pred: f64, gt: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(Error::Config(format!("Laplace scale must be positive, got {b}")));
    }
    Ok(kl_of_delta(pred - gt, b))
}

/// Angular variant: the difference is wrapped to `[-π, π)` first.
pub fn laplace_kl_angle(pred: f64, gt: f64, b: f64) -> Result<f64> {
    laplace_kl(wrap_angle(pred - gt), 0.0, b)
}

/// Derivative of the Laplace KL with respect to the difference.
pub fn laplace_kl_grad(delta: f64, b: f64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    delta.signum() * (1.0 - (-delta.abs() / b).exp()) / b
}

/// Classification targets over all `N` predictions: the matched class for
/// assigned rows, "no object" (last column) elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub targets: Matrix,
    pub row_weights: Vec<f64>,
}

impl LossTargets {
    pub fn new<B>(gt: &GroundTruth<B>, assignment: &Assignment, num_classes: usize, no_object_weight: f64) -> Self {
        let n = assignment.num_preds;
        let mut targets = Matrix::zeros(n, num_classes + 1);
        let mut row_weights = vec![no_object_weight; n];
        for (j, g) in assignment.gt_of_pred().into_iter().enumerate() {
            match g {
                Some(g) => {
                    targets.set(j, gt.labels[g], 1.0);
                    row_weights[j] = 1.0;
                }
                None => targets.set(j, num_classes, 1.0),
            }
        }
        Self { targets, row_weights }
    }
}

/// Weighted focal sum divided by `norm`, with its gradient.
pub fn focal_terms(probs: &Matrix, targets: &LossTargets, gamma: f64, norm: f64) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut total = 0.0;
    for i in 0..probs.rows() {
        let w = targets.row_weights[i] / norm;
        for k in 0..probs.cols() {
            let (v, d) = focal_element(probs.get(i, k), targets.targets.get(i, k), gamma);
            total += w * v;
            grad.set(i, k, w * d);
        }
    }
    (total, grad)
}

/// Laplace-KL sums for the centre, size and heading groups over matched
/// pairs, each divided by `norm`, with per-group gradients.
pub fn regression_terms<B: BoxParams>(
    boxes: &Matrix,
    gt: &GroundTruth<B>,
    assignment: &Assignment,
    b: f64,
    norm: f64,
) -> [(f64, Matrix); 3] {
    let groups: [Vec<usize>; 3] = [B::CENTER.collect(), B::SIZE.collect(), B::HEADING.into_iter().collect()];
    groups.map(|cols| {
        let mut grad = Matrix::zeros(boxes.rows(), boxes.cols());
        let mut total = 0.0;
        for (g, &p) in assignment.pred_of_gt.iter().enumerate() {
            let gp = gt.boxes[g].params();
            let pp = boxes.row(p);
            for &k in &cols {
                let d = param_delta::<B>(pp, &gp, k);
                total += kl_of_delta(d, b) / norm;
                grad.set(p, k, laplace_kl_grad(d, b) / norm);
            }
        }
        (total, grad)
    })
}

/// Corner `k` relative to the box centre.
fn corner_offset(p: &[f64; 7], k: usize) -> [f64; 3] {
    let (s, c) = p[6].sin_cos();
    let sg = CORNER_SIGNS[k];
    let (dx, dy) = (sg[0] * 0.5 * p[3], sg[1] * 0.5 * p[4]);
    [c * dx - s * dy, s * dx + c * dy, sg[2] * 0.5 * p[5]]
}

/// Corner distances are formed as centre difference plus offset difference,
/// so a pure translation yields exactly its length at every corner.
fn corner_sum(p: &[f64; 7], g: &[f64; 7]) -> (f64, [f64; 7]) {
    let (s, c) = p[6].sin_cos();
    let dc = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
    let mut total = 0.0;
    let mut grad = [0.0; 7];
    for k in 0..8 {
        let (po, go) = (corner_offset(p, k), corner_offset(g, k));
        let d = [0, 1, 2].map(|i| dc[i] + (po[i] - go[i]));
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        total += dist;
        if dist == 0.0 {
            continue;
        }
        let u = [d[0] / dist, d[1] / dist, d[2] / dist];
        let sg = CORNER_SIGNS[k];
        let (dx, dy) = (sg[0] * 0.5 * p[3], sg[1] * 0.5 * p[4]);
        grad[0] += u[0];
        grad[1] += u[1];
        grad[2] += u[2];
        grad[3] += 0.5 * sg[0] * (c * u[0] + s * u[1]);
        grad[4] += 0.5 * sg[1] * (-s * u[0] + c * u[1]);
        grad[5] += 0.5 * sg[2] * u[2];
        grad[6] += (-s * dx - c * dy) * u[0] + (c * dx - s * dy) * u[1];
    }
    (total, grad)
}

/// Sum of the eight canonical-order corner distances.
pub fn corner_loss(pred: &Box3D, gt: &Box3D) -> f64 {
    corner_sum(&pred.to_array(), &gt.to_array()).0
}

/// Corner distances over matched pairs divided by `norm`, with the
/// gradient with respect to the decoded box matrix.
pub fn corner_terms(
    boxes: &Matrix,
    gt: &GroundTruth<Box3D>,
    assignment: &Assignment,
    flip: bool,
    norm: f64,
) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(boxes.rows(), boxes.cols());
    let mut total = 0.0;
    for (g, &p) in assignment.pred_of_gt.iter().enumerate() {
        let gc = gt.boxes[g].to_array();
        let pp: [f64; 7] = boxes.row(p).try_into().expect("3D boxes have 7 fields");
        let mut best = corner_sum(&pp, &gc);
        if flip {
            let mut flipped = pp;
            flipped[6] += std::f64::consts::PI;
            let alt = corner_sum(&flipped, &gc);
            if alt.0 < best.0 {
                best = alt;
            }
        }
        total += best.0 / norm;
        for (k, v) in best.1.iter().enumerate() {
            grad.set(p, k, v / norm);
        }
    }
    (total, grad)
}

struct Terms {
    breakdown: LossBreakdown,
    cls_grad: Matrix,
    reg_grads: [Matrix; 3],
    corner_grad: Matrix,
}

fn compute<B: BoxParams + 'static>(
    probs: &Matrix,
    boxes: &Matrix,
    gt: &GroundTruth<B>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<Terms> {
    cfg.validate()?;
    if assignment.num_preds != probs.rows() || boxes.rows() != probs.rows() || assignment.len() != gt.len() {
        return Err(Error::Contract("assignment does not fit predictions and ground truth".into()));
    }
    let norm = assignment.len().max(1) as f64;
    let targets = LossTargets::new(gt, assignment, probs.cols() - 1, cfg.no_object_weight);
    let (cls, cls_grad) = focal_terms(probs, &targets, cfg.gamma, norm);
    let [(center, gc), (size, gs), (heading, gh)] = regression_terms(boxes, gt, assignment, cfg.laplace_scale, norm);
    let (corner, corner_grad) = match as_box3d(gt) {
        Some(gt3) => corner_terms(boxes, gt3, assignment, cfg.corner_flip, norm),
        None => (0.0, Matrix::zeros(boxes.rows(), boxes.cols())),
    };
    Ok(Terms {
        breakdown: LossBreakdown::compose(cls, center, size, heading, corner, cfg),
        cls_grad,
        reg_grads: [gc, gs, gh],
        corner_grad,
    })
}

fn as_box3d<B: 'static>(gt: &GroundTruth<B>) -> Option<&GroundTruth<Box3D>> {
    (gt as &dyn std::any::Any).downcast_ref::<GroundTruth<Box3D>>()
}

fn detection_matrices<B: BoxParams>(preds: &DetectionSet<B>) -> (Matrix, Matrix) {
    let probs = Matrix::from_rows(&preds.class_probs);
    let rows: Vec<Vec<f64>> = preds.boxes.iter().map(|b| b.params()).collect();
    let boxes = if rows.is_empty() {
        Matrix::zeros(0, B::DIM)
    } else {
        Matrix::from_rows(&rows)
    };
    (probs, boxes)
}

/// The composite loss evaluated on plain values.
pub fn total_loss<B: BoxParams + 'static>(
    preds: &DetectionSet<B>,
    gt: &GroundTruth<B>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (probs, boxes) = detection_matrices(preds);
    Ok(compute(&probs, &boxes, gt, assignment, cfg)?.breakdown)
}

/// Records the composite loss on the tape of `f` against a fixed
/// assignment and returns the scalar loss node.
pub fn loss_on_tape<B: BoxParams + 'static>(
    f: &mut Forward,
    out: &HeadOutput,
    gt: &GroundTruth<B>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let probs = f.tape.value(out.probs).clone();
    let boxes = f.tape.value(out.boxes).clone();
    let t = compute(&probs, &boxes, gt, assignment, cfg)?;
    let bd = t.breakdown;
    let tape = &mut f.tape;
    let cls = tape.scalar_fn(bd.cls, &[out.probs], vec![t.cls_grad]);
    let [gc, gs, gh] = t.reg_grads;
    let center = tape.scalar_fn(bd.center, &[out.boxes], vec![gc]);
    let size = tape.scalar_fn(bd.size, &[out.boxes], vec![gs]);
    let heading = tape.scalar_fn(bd.heading, &[out.boxes], vec![gh]);
    let corner = tape.scalar_fn(bd.corner, &[out.boxes], vec![t.corner_grad]);
    let corner = tape.scale(corner, cfg.corner_weight);
    let reg = tape.add(center, size);
    let reg = tape.add(reg, heading);
    let reg = tape.add(reg, corner);
    let reg = tape.scale(reg, cfg.reg_weight);
    let cls = tape.scale(cls, cfg.cls_weight);
    Ok((tape.add(cls, reg), bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::detection::{match_predictions, BoxCoder, HeadMode};
    use crate::geometry::{corners_of, Box2D};
    use crate::nn::{Mode, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bce(p: f64, v: f64) -> f64 {
        -(v * p.ln() + (1.0 - v) * (1.0 - p).ln())
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(0.001..0.999);
            let v = f64::from(u8::from(rng.random_bool(0.5)));
            assert!((focal_element(p, v, 0.0).0 - bce(p, v)).abs() < 1e-7);
        }
    }

    #[test]
    fn focal_reference_values() {
        let (v, _) = focal_element(0.5, 1.0, 2.0);
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.17329).abs() < 1e-5);
        assert!(focal_loss(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0) <= 1e-5);
    }

    #[test]
    fn focal_derivative_matches_differences() {
        for &(p, v, g) in &[(0.3, 1.0, 2.0), (0.7, 0.0, 2.0), (0.2, 0.0, 0.5), (0.9, 1.0, 0.0), (0.4, 1.0, 1.0)] {
            let h = 1e-6;
            let num = (focal_element(p + h, v, g).0 - focal_element(p - h, v, g).0) / (2.0 * h);
            let ana = focal_element(p, v, g).1;
            assert!((num - ana).abs() < 1e-6 * ana.abs().max(1.0), "{p} {v} {g}: {num} vs {ana}");
        }
    }

    #[test]
    fn laplace_reference_values() {
        assert_eq!(laplace_kl(2.0, 2.0, 1.0).unwrap(), 0.0);
        assert!((laplace_kl(1.0, 0.0, 1.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let big = laplace_kl(60.0, 0.0, 2.0).unwrap();
        assert!((big - (30.0 - 1.0)).abs() < 1e-12);
        assert!(matches!(laplace_kl(1.0, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(laplace_kl(1.0, 0.0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn corner_reference_values() {
        let a = Box3D::new(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.4).unwrap();
        assert_eq!(corner_loss(&a, &a), 0.0);
        let b = Box3D::new(2.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.0).unwrap();
        let a0 = Box3D::new(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.0).unwrap();
        assert_eq!(corner_loss(&b, &a0), 8.0);
    }

    #[test]
    fn corner_loss_matches_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut r = || -> Box3D {
                Box3D::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..5.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(-3.0..3.0),
                )
                .unwrap()
            };
            let (a, b) = (r(), r());
            let (ca, cb) = (corners_of(&a).unwrap().0, corners_of(&b).unwrap().0);
            let oracle: f64 = ca
                .iter()
                .zip(&cb)
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .sum();
            assert!((corner_loss(&a, &b) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_variant_forgives_reversed_heading() {
        let g = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.2).unwrap();
        let p = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.2 + std::f64::consts::PI).unwrap();
        let gt = GroundTruth::new(vec![g], vec![0]).unwrap();
        let a = Assignment::new(vec![0], 1).unwrap();
        let m = Matrix::row_vector(p.to_array().to_vec());
        assert!(corner_terms(&m, &gt, &a, false, 1.0).0 > 1.0);
        assert!(corner_terms(&m, &gt, &a, true, 1.0).0 < 1e-12);
    }

    fn empty_scene_preds(n: usize) -> DetectionSet {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        DetectionSet::new(vec![b; n], vec![vec![0.0, 0.0, 1.0]; n]).unwrap()
    }

    #[test]
    fn empty_scene_fixed_point() {
        let preds = empty_scene_preds(4);
        let gt = GroundTruth::empty();
        let a = match_predictions(&preds, &gt, 1.0, 1.0).unwrap();
        let l = total_loss(&preds, &gt, &a, &LossConfig::default()).unwrap();
        assert!(l.total < 1e-4);
    }

    #[test]
    fn perfect_matches_leave_only_classification() {
        let g = Box3D::new(3.0, 1.0, -1.0, 4.0, 1.7, 1.5, 0.3).unwrap();
        let other = Box3D::new(-3.0, 1.0, -1.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let preds =
            DetectionSet::new(vec![other, g], vec![vec![0.1, 0.1, 0.8], vec![0.9, 0.05, 0.05]]).unwrap();
        let gt = GroundTruth::new(vec![g], vec![0]).unwrap();
        let a = match_predictions(&preds, &gt, 1.0, 1.0).unwrap();
        let cfg = LossConfig::default();
        let l = total_loss(&preds, &gt, &a, &cfg).unwrap();
        for v in [l.center, l.size, l.heading, l.corner] {
            assert!(v < 1e-9);
        }
        assert!((l.total - cfg.cls_weight * l.cls).abs() < 1e-12);
    }

    #[test]
    fn box2d_loss_has_no_heading_or_corner() {
        let g = Box2D::new(10.0, 10.0, 4.0, 6.0).unwrap();
        let p = Box2D::new(11.0, 9.0, 5.0, 6.0).unwrap();
        let preds = DetectionSet::new(vec![p], vec![vec![0.6, 0.3, 0.1]]).unwrap();
        let gt = GroundTruth::new(vec![g], vec![0]).unwrap();
        let a = Assignment::new(vec![0], 1).unwrap();
        let l = total_loss(&preds, &gt, &a, &LossConfig::default()).unwrap();
        assert_eq!((l.heading, l.corner), (0.0, 0.0));
        assert!((l.center - 2.0 * (-1f64).exp()).abs() < 1e-12);
    }

    /// Random raw head outputs, decoded on a tape, with a fixed assignment.
    struct Instance {
        raw: Matrix,
        logits: Matrix,
        gt: GroundTruth,
        coder: BoxCoder,
    }

    fn instance(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=n.min(3));
        let raw = Matrix::from_vec(n, 7, (0..n * 7).map(|_| rng.random_range(-1.0..1.0)).collect());
        let logits = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect());
        let boxes = (0..m)
            .map(|_| {
                Box3D::new(
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-2.0..0.0),
                    rng.random_range(1.0..5.0),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.8..2.0),
                    rng.random_range(-3.1..3.1),
                )
                .unwrap()
            })
            .collect();
        let labels = (0..m).map(|_| rng.random_range(0..2)).collect();
        Instance {
            raw,
            logits,
            gt: GroundTruth::new(boxes, labels).unwrap(),
            coder: BoxCoder::for_region(&[-10.0, -10.0, -3.0], &[10.0, 10.0, 1.0], &[3.9, 1.6, 1.5]),
        }
    }

    fn evaluate(inst: &Instance, raw: &Matrix, logits: &Matrix, a: Option<&Assignment>, cfg: &LossConfig) -> (f64, Assignment, Option<(Matrix, Matrix)>) {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, Mode::Train, 0);
        let r = f.tape.leaf(raw.clone(), true);
        let l = f.tape.leaf(logits.clone(), true);
        let boxes = inst.coder.decode(&mut f, r, HeadMode::Box3d);
        let probs = f.tape.softmax(l);
        let out = HeadOutput {
            raw_boxes: r,
            boxes,
            logits: l,
            probs,
        };
        let a = match a {
            Some(a) => a.clone(),
            None => {
                let d = out.detections::<Box3D>(&f).unwrap();
                match_predictions(&d, &inst.gt, 1.0, 1.0).unwrap()
            }
        };
        let (loss, bd) = loss_on_tape(&mut f, &out, &inst.gt, &a, cfg).unwrap();
        assert!((bd.total - f.tape.value(loss).item()).abs() < 1e-12);
        let g = f.tape.backward(loss);
        let grads = (g.get(r).unwrap().clone(), g.get(l).unwrap().clone());
        (bd.total, a, Some(grads))
    }

    fn check_gradients(seed: u64, cfg: &LossConfig) -> f64 {
        let inst = instance(seed);
        let (_, a, grads) = evaluate(&inst, &inst.raw, &inst.logits, None, cfg);
        let (gr, gl) = grads.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (which, base, ana) in [(0, &inst.raw, &gr), (1, &inst.logits, &gl)] {
            for k in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[k] += h;
                let mut minus = base.clone();
                minus.data_mut()[k] -= h;
                let val = |m: &Matrix| {
                    if which == 0 {
                        evaluate(&inst, m, &inst.logits, Some(&a), cfg).0
                    } else {
                        evaluate(&inst, &inst.raw, m, Some(&a), cfg).0
                    }
                };
                let num = (val(&plus) - val(&minus)) / (2.0 * h);
                let an = ana.data()[k];
                let rel = (num - an).abs() / an.abs().max(num.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn total_loss_gradient_matches_differences() {
        let cfg = LossConfig::default();
        for seed in 0..20 {
            let e = check_gradients(seed, &cfg);
            assert!(e < 1e-4, "seed {seed}: {e}");
        }
        let flip = LossConfig {
            corner_flip: true,
            ..LossConfig::default()
        };
        for seed in 20..25 {
            assert!(check_gradients(seed, &flip) < 1e-4);
        }
    }

    #[test]
    fn scalar_fn_nodes_accumulate_into_shared_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0]), true);
        let a = t.scalar_fn(3.0, &[x], vec![Matrix::row_vector(vec![1.0, 0.0])]);
        let b = t.scalar_fn(4.0, &[x], vec![Matrix::row_vector(vec![0.0, 2.0])]);
        let s = t.add(a, b);
        assert_eq!(t.backward(s).get(x).unwrap().data(), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in any::<u64>()) {
            let inst = instance(seed);
            let (total, a, _) = evaluate(&inst, &inst.raw, &inst.logits, None, &LossConfig::default());
            prop_assert!(total >= 0.0);
            let store = ParamStore::new();
            let mut f = Forward::new(&store, Mode::Eval, 0);
            let r = f.tape.constant(inst.raw.clone());
            let b = inst.coder.decode(&mut f, r, HeadMode::Box3d);
            let l = f.tape.constant(inst.logits.clone());
            let p = f.tape.softmax(l);
            let out = HeadOutput { raw_boxes: r, boxes: b, logits: l, probs: p };
            let d = out.detections::<Box3D>(&f).unwrap();
            let bd = total_loss(&d, &inst.gt, &a, &LossConfig::default()).unwrap();
            for v in [bd.cls, bd.center, bd.size, bd.heading, bd.corner] {
                prop_assert!(v >= 0.0);
            }
            let again = bd.cls_weight * bd.cls
                + bd.reg_weight * (bd.center + bd.size + bd.heading + bd.corner_weight * bd.corner);
            prop_assert!((again - bd.total).abs() < 1e-9);
        }

        #[test]
        fn unit_translation_costs_eight_exactly(
            cx in -50.0f64..50.0, cy in -50.0f64..50.0, cz in -3.0f64..3.0,
            l in 0.5f64..6.0, w in 0.5f64..3.0, h in 0.5f64..3.0, t in -3.1f64..3.1,
        ) {
            let g = Box3D::new(cx, cy, cz, l, w, h, t).unwrap();
            let p = Box3D::new(cx + 1.0, cy, cz, l, w, h, t).unwrap();
            prop_assume!(p.cx - g.cx == 1.0);
            prop_assert_eq!(corner_loss(&p, &g), 8.0);
        }

        #[test]
        fn heading_kl_is_periodic(pred in -10.0f64..10.0, gt in -3.0f64..3.0, b in 0.1f64..3.0) {
            let a = laplace_kl_angle(pred, gt, b).unwrap();
            let c = laplace_kl_angle(pred + 2.0 * std::f64::consts::PI, gt, b).unwrap();
            prop_assert!((a - c).abs() < 1e-9);
        }
    }
}
