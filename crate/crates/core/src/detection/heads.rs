use serde::{Deserialize, Serialize};

use super::{BoxParams, DetectionSet};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box2D, Box3D};
use crate::nn::{Activation, Forward, Init, Mlp, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Box2d,
    Box3d,
}

impl HeadMode {
    pub fn box_dim(self) -> usize {
        match self {
            HeadMode::Box2d => Box2D::DIM,
            HeadMode::Box3d => Box3D::DIM,
        }
    }
}

/// Maps raw head outputs to box parameters: centres are an affine map of
/// the raw values, sizes are `prior · exp(raw)` and headings are wrapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub center_offset: Vec<f64>,
    pub center_scale: Vec<f64>,
    pub size_prior: Vec<f64>,
}

impl BoxCoder {
    /// Centres spread over an axis-aligned region, sizes around a prior.
    pub fn for_region(min: &[f64], max: &[f64], size_prior: &[f64]) -> Self {
        Self {
            center_offset: min.iter().zip(max).map(|(a, b)| 0.5 * (a + b)).collect(),
            center_scale: min.iter().zip(max).map(|(a, b)| 0.5 * (b - a)).collect(),
            size_prior: size_prior.to_vec(),
        }
    }

    fn check(&self, mode: HeadMode) -> Result<()> {
        let n = match mode {
            HeadMode::Box2d => 2,
            HeadMode::Box3d => 3,
        };
        if self.center_offset.len() != n || self.center_scale.len() != n || self.size_prior.len() != n {
            return Err(Error::Config(format!("box coder needs {n} centre and size entries")));
        }
        if self.size_prior.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("size priors must be positive".into()));
        }
        Ok(())
    }

    pub fn decode(&self, f: &mut Forward, raw: Var, mode: HeadMode) -> Var {
        let n = self.center_offset.len();
        let c = f.tape.slice_cols(raw, 0, n);
        let c = f.tape.affine_cols(c, &self.center_scale, &self.center_offset);
        let s = f.tape.slice_cols(raw, n, n);
        let log_prior: Vec<f64> = self.size_prior.iter().map(|p| p.ln()).collect();
        let s = f.tape.affine_cols(s, &vec![1.0; n], &log_prior);
        let s = f.tape.exp(s);
        match mode {
            HeadMode::Box2d => f.tape.concat_cols(&[c, s]),
            HeadMode::Box3d => {
                let h = f.tape.slice_cols(raw, 2 * n, 1);
                let h = f.tape.map_identity_grad(h, wrap_angle);
                f.tape.concat_cols(&[c, s, h])
            }
        }
    }

    /// Inverse of [`decode`](Self::decode) for targets inside the region.
    pub fn encode(&self, params: &[f64]) -> Vec<f64> {
        let n = self.center_offset.len();
        let mut raw = Vec::with_capacity(params.len());
        for k in 0..n {
            raw.push((params[k] - self.center_offset[k]) / self.center_scale[k]);
        }
        for k in 0..n {
            raw.push((params[n + k] / self.size_prior[k]).ln());
        }
        raw.extend_from_slice(&params[2 * n..]);
        raw
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub num_proposals: usize,
    pub num_classes: usize,
    /// Hidden widths shared by the box and class MLPs.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_proposals: 256,
            num_classes: 2,
            hidden: vec![512],
            activation: Activation::Gelu,
        }
    }
}

/// Tape handles for one head evaluation. `boxes` is `N × O` decoded
/// parameters, `probs` is `N × (C + 1)`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub raw_boxes: Var,
    pub boxes: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Box and classification MLPs reading a single pooled vector.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cfg: HeadConfig,
    pub mode: HeadMode,
    pub coder: BoxCoder,
    pub in_dim: usize,
    pub box_mlp: Mlp,
    pub cls_mlp: Mlp,
}

impl DetectionHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        cfg: &HeadConfig,
        mode: HeadMode,
        coder: BoxCoder,
    ) -> Result<Self> {
        if cfg.num_proposals == 0 || cfg.num_proposals > 256 {
            return Err(Error::Config(format!(
                "proposal count {} outside 1..=256",
                cfg.num_proposals
            )));
        }
        if cfg.num_classes == 0 {
            return Err(Error::Config("at least one object class is required".into()));
        }
        coder.check(mode)?;
        let n = cfg.num_proposals;
        let mut box_widths = cfg.hidden.clone();
        box_widths.push(n * mode.box_dim());
        let mut cls_widths = cfg.hidden.clone();
        cls_widths.push(n * (cfg.num_classes + 1));
        let box_mlp = Mlp::new(store, init, &format!("{name}.box"), in_dim, &box_widths, cfg.activation, false);
        let cls_mlp = Mlp::new(store, init, &format!("{name}.cls"), in_dim, &cls_widths, cfg.activation, false);
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            coder,
            in_dim,
            box_mlp,
            cls_mlp,
        })
    }

    pub fn forward(&self, f: &mut Forward, readout: Var) -> Result<HeadOutput> {
        let (r, c) = f.tape.shape(readout);
        if r != 1 || c != self.in_dim {
            return Err(Error::Config(format!(
                "head expects a 1x{} readout, got {r}x{c}",
                self.in_dim
            )));
        }
        let n = self.cfg.num_proposals;
        let flat = self.box_mlp.forward(f, readout);
        let raw_boxes = f.tape.reshape(flat, n, self.mode.box_dim());
        let boxes = self.coder.decode(f, raw_boxes, self.mode);
        let flat = self.cls_mlp.forward(f, readout);
        let logits = f.tape.reshape(flat, n, self.cfg.num_classes + 1);
        let probs = f.tape.softmax(logits);
        Ok(HeadOutput {
            raw_boxes,
            boxes,
            logits,
            probs,
        })
    }
}

fn prob_rows(probs: &Matrix) -> Vec<Vec<f64>> {
    (0..probs.rows()).map(|i| probs.row(i).to_vec()).collect()
}

impl HeadOutput {
    /// Reads the decoded predictions off the tape. Sizes are clamped to a
    /// tiny positive floor so that underflowed exponentials stay valid.
    pub fn detections<B: BoxParams>(&self, f: &Forward) -> Result<DetectionSet<B>> {
        let bm = f.tape.value(self.boxes);
        if bm.cols() != B::DIM {
            return Err(Error::Contract(format!(
                "head emits {} box fields, caller expects {}",
                bm.cols(),
                B::DIM
            )));
        }
        let mut boxes = Vec::with_capacity(bm.rows());
        for i in 0..bm.rows() {
            let mut p = bm.row(i).to_vec();
            for k in B::SIZE {
                p[k] = p[k].max(1e-9);
            }
            boxes.push(B::from_params(&p)?);
        }
        DetectionSet::new(boxes, prob_rows(f.tape.value(self.probs)))
    }
}
