//! Detector assembly: camera and lidar branches, the fusion stage and a
//! detection head, with linear stand-ins for ablated stages and the
//! single-branch pretraining detectors.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::camera::{patchify, BranchOutput, CameraConfig, CameraVit, ImageTensor};
use crate::data::SceneSample;
use crate::detection::{BoxCoder, DetectionHead, DetectionSet, HeadConfig, HeadMode, HeadOutput};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStrategy, MixVit};
use crate::geometry::{Box2D, Box3D};
use crate::lidar::{prepare_voxels, LidarConfig, LidarVit, Range3, VfeConfig, VoxelConfig};
use crate::nn::{Forward, Init, Linear, ParamStore};
use crate::tensor::Matrix;

/// Which network a parameter store describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Camera branch with an image-plane head.
    Camera2d,
    /// Lidar branch with a 3D head.
    Lidar3d,
    /// Both branches, the fusion stage and a 3D head.
    Fusion,
}

impl DetectorKind {
    pub fn head_mode(self) -> HeadMode {
        match self {
            DetectorKind::Camera2d => HeadMode::Box2d,
            _ => HeadMode::Box3d,
        }
    }
}

/// Which stages are full transformers; a disabled stage becomes a single
/// width-preserving linear projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelVariant {
    pub camera_vit: bool,
    pub lidar_vit: bool,
    pub mix_vit: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self::NORMAL
    }
}

impl ModelVariant {
    pub const NORMAL: Self = Self {
        camera_vit: true,
        lidar_vit: true,
        mix_vit: true,
    };
    pub const WITHOUT_CAMERA: Self = Self {
        camera_vit: false,
        ..Self::NORMAL
    };
    pub const WITHOUT_LIDAR: Self = Self {
        lidar_vit: false,
        ..Self::NORMAL
    };
    pub const WITHOUT_BOTH: Self = Self {
        camera_vit: false,
        lidar_vit: false,
        mix_vit: true,
    };
    pub const WITHOUT_MIX: Self = Self {
        mix_vit: false,
        ..Self::NORMAL
    };
    pub const ALL: [Self; 5] = [
        Self::NORMAL,
        Self::WITHOUT_CAMERA,
        Self::WITHOUT_LIDAR,
        Self::WITHOUT_BOTH,
        Self::WITHOUT_MIX,
    ];

    pub fn label(self) -> &'static str {
        match (self.camera_vit, self.lidar_vit, self.mix_vit) {
            (true, true, true) => "Normal",
            (false, true, true) => "Without CameraViT",
            (true, false, true) => "Without LidarViT",
            (false, false, true) => "Without Both",
            (true, true, false) => "Without MixViT",
            _ => "Custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[height, width]` of the input images before patch padding.
    pub image_size: [usize; 2],
    pub camera: CameraConfig,
    pub lidar: LidarConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub variant: ModelVariant,
    /// `[l, w, h]` around which 3D sizes are decoded.
    pub size_prior: [f64; 3],
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 384],
            camera: CameraConfig::default(),
            lidar: LidarConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            variant: ModelVariant::NORMAL,
            size_prior: [3.9, 1.6, 1.56],
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Reduced dimensions for desk-scale runs on the toy synthetic scenes:
    /// width 64, two blocks per encoder and 32 proposals.
    pub fn toy() -> Self {
        let encoder = EncoderConfig {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_hidden: 128,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        let range = Range3 {
            min: [0.0, -16.0, -3.0],
            max: [32.0, 16.0, 1.0],
        };
        let camera_tokens = 4 * 8;
        let lidar_tokens = 128;
        Self {
            image_size: [32, 64],
            camera: CameraConfig {
                patch_h: 8,
                patch_w: 8,
                mlp_widths: vec![64],
                max_patches: camera_tokens,
                encoder: encoder.clone(),
            },
            lidar: LidarConfig {
                voxel: VoxelConfig {
                    cell_size: [1.0, 1.0, 1.0],
                    range,
                    max_points: 16,
                    max_voxels: lidar_tokens,
                },
                vfe: VfeConfig {
                    point_mlp: vec![16, 32],
                    fcn_units: 32,
                    layers: 2,
                    per_scene_norm: true,
                },
                encoder: encoder.clone(),
            },
            fusion: FusionConfig {
                strategy: FusionStrategy::Concat,
                token_mlp: vec![64, 64],
                max_tokens: camera_tokens + lidar_tokens,
                direct_camera_tokens: camera_tokens,
                direct_lidar_tokens: lidar_tokens,
                encoder,
            },
            head: HeadConfig {
                num_proposals: 32,
                hidden: vec![128],
                ..HeadConfig::default()
            },
            variant: ModelVariant::NORMAL,
            size_prior: [3.9, 1.6, 1.56],
            init_std: 0.02,
        }
    }

    /// Patch grid `(rows, cols)` of a padded input image.
    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.image_size[0].div_ceil(self.camera.patch_h.max(1)),
            self.image_size[1].div_ceil(self.camera.patch_w.max(1)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || self.camera.patch_h == 0 || self.camera.patch_w == 0 {
            return Err(Error::Config("image and patch sizes must be positive".into()));
        }
        let (gr, gc) = self.patch_grid();
        if gr * gc > self.camera.max_patches {
            return Err(Error::Config(format!(
                "{} patches exceed the camera cap {}",
                gr * gc,
                self.camera.max_patches
            )));
        }
        if self.camera.encoder.width != self.lidar.encoder.width {
            return Err(Error::Config(format!(
                "camera width {} and lidar width {} must agree",
                self.camera.encoder.width, self.lidar.encoder.width
            )));
        }
        if self.fusion.strategy == FusionStrategy::DirectConcat && self.fusion.direct_camera_tokens != gr * gc {
            return Err(Error::Config(format!(
                "direct fusion expects {} camera tokens, the image yields {}",
                self.fusion.direct_camera_tokens,
                gr * gc
            )));
        }
        if !(self.init_std > 0.0) || self.size_prior.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("init std and size priors must be positive".into()));
        }
        for e in [&self.camera.encoder, &self.lidar.encoder, &self.fusion.encoder] {
            e.validate()?;
        }
        Ok(())
    }

    pub fn box_coder_3d(&self) -> BoxCoder {
        let r = &self.lidar.voxel.range;
        BoxCoder::for_region(&r.min, &r.max, &self.size_prior)
    }

    pub fn box_coder_2d(&self) -> BoxCoder {
        let [h, w] = self.image_size.map(|v| v as f64);
        BoxCoder::for_region(&[0.0, 0.0], &[w, h], &[w / 4.0, h / 4.0])
    }
}

/// Camera stand-in: a linear patch projection with a mean readout.
#[derive(Clone, Debug)]
pub struct LinearCamera {
    pub cfg: CameraConfig,
    pub projection: Linear,
}

/// Lidar stand-in: a linear map of each voxel's mean point feature.
#[derive(Clone, Debug)]
pub struct LinearLidar {
    pub cfg: LidarConfig,
    pub projection: Linear,
}

#[derive(Clone, Debug)]
pub enum CameraStage {
    Vit(Box<CameraVit>),
    Linear(LinearCamera),
}

#[derive(Clone, Debug)]
pub enum LidarStage {
    Vit(Box<LidarVit>),
    Linear(LinearLidar),
}

/// Fusion stage, or a linear map of the concatenated branch readouts.
#[derive(Clone, Debug)]
pub enum MixStage {
    Vit(Box<MixVit>),
    Linear(Linear),
}

fn mean_rows(f: &mut Forward, x: Var) -> Var {
    let n = f.tape.shape(x).0;
    let w = f.tape.constant(Matrix::filled(1, n, 1.0 / n as f64));
    f.tape.matmul(w, x)
}

impl CameraStage {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &CameraConfig, vit: bool) -> Result<Self> {
        Ok(if vit {
            Self::Vit(Box::new(CameraVit::new(store, init, "camera", cfg)?))
        } else {
            Self::Linear(LinearCamera {
                cfg: cfg.clone(),
                projection: Linear::new(store, init, "camera.linear", cfg.patch_dim(), cfg.encoder.width),
            })
        })
    }

    pub fn encode(&self, f: &mut Forward, img: &ImageTensor) -> Result<BranchOutput> {
        match self {
            Self::Vit(v) => {
                let img = img.padded_to(v.cfg.patch_h, v.cfg.patch_w);
                v.encode_image(f, &img)
            }
            Self::Linear(l) => {
                let img = img.padded_to(l.cfg.patch_h, l.cfg.patch_w);
                let grid = patchify(&img, l.cfg.patch_h, l.cfg.patch_w)?;
                let x = f.tape.constant(grid.patches);
                let seq = l.projection.forward(f, x);
                let readout = mean_rows(f, seq);
                Ok(BranchOutput { seq, readout })
            }
        }
    }
}

impl LidarStage {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &LidarConfig, vit: bool) -> Result<Self> {
        Ok(if vit {
            Self::Vit(Box::new(LidarVit::new(store, init, "lidar", cfg)?))
        } else {
            Self::Linear(LinearLidar {
                cfg: cfg.clone(),
                projection: Linear::new(store, init, "lidar.linear", 6, cfg.encoder.width),
            })
        })
    }

    pub fn encode(&self, f: &mut Forward, sample: &SceneSample, sample_seed: u64) -> Result<BranchOutput> {
        match self {
            Self::Vit(v) => v.encode_cloud(f, &sample.cloud, sample_seed),
            Self::Linear(l) => {
                let batch = prepare_voxels(&sample.cloud, &l.cfg.voxel, sample_seed)?;
                if batch.is_empty() {
                    return Err(Error::EmptyScene);
                }
                let mut means = Matrix::zeros(batch.len(), 6);
                for (v, &(start, n)) in batch.segments.iter().enumerate() {
                    let out = means.row_mut(v);
                    for r in start..start + n {
                        for (o, x) in out.iter_mut().zip(batch.features.row(r)) {
                            *o += x / n as f64;
                        }
                    }
                }
                let x = f.tape.constant(means);
                let seq = l.projection.forward(f, x);
                let readout = mean_rows(f, seq);
                Ok(BranchOutput { seq, readout })
            }
        }
    }
}

/// A complete detector: architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: DetectorKind,
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub camera: Option<CameraStage>,
    pub lidar: Option<LidarStage>,
    pub mix: Option<MixStage>,
    pub head: DetectionHead,
}

impl Model {
    /// Builds the network with freshly initialised parameters. Parameter
    /// names are prefixed `camera.`, `lidar.`, `mix.` and `head.`, so
    /// branch weights transfer between detector kinds by prefix.
    pub fn new(kind: DetectorKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, cfg.init_std);
        let v = cfg.variant;
        let camera = match kind {
            DetectorKind::Camera2d | DetectorKind::Fusion => {
                Some(CameraStage::new(&mut store, &mut init, &cfg.camera, v.camera_vit)?)
            }
            DetectorKind::Lidar3d => None,
        };
        let lidar = match kind {
            DetectorKind::Lidar3d | DetectorKind::Fusion => {
                Some(LidarStage::new(&mut store, &mut init, &cfg.lidar, v.lidar_vit)?)
            }
            DetectorKind::Camera2d => None,
        };
        let h = cfg.camera.encoder.width;
        let (mix, head_in) = match kind {
            DetectorKind::Fusion if v.mix_vit => (
                Some(MixStage::Vit(Box::new(MixVit::new(&mut store, &mut init, "mix", &cfg.fusion, h)?))),
                cfg.fusion.encoder.width,
            ),
            DetectorKind::Fusion => (
                Some(MixStage::Linear(Linear::new(
                    &mut store,
                    &mut init,
                    "mix.linear",
                    2 * h,
                    cfg.fusion.encoder.width,
                ))),
                cfg.fusion.encoder.width,
            ),
            DetectorKind::Camera2d => (None, cfg.camera.encoder.width),
            DetectorKind::Lidar3d => (None, cfg.lidar.encoder.width),
        };
        let coder = match kind {
            DetectorKind::Camera2d => cfg.box_coder_2d(),
            _ => cfg.box_coder_3d(),
        };
        let head = DetectionHead::new(&mut store, &mut init, "head", head_in, &cfg.head, kind.head_mode(), coder)?;
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            store,
            camera,
            lidar,
            mix,
            head,
        })
    }

    /// The vector the detection head reads.
    pub fn readout(&self, f: &mut Forward, sample: &SceneSample, sample_seed: u64) -> Result<Var> {
        let cam = match &self.camera {
            Some(c) => Some(c.encode(f, &sample.image)?),
            None => None,
        };
        let lid = match &self.lidar {
            Some(l) => Some(l.encode(f, sample, sample_seed)?),
            None => None,
        };
        match (cam, lid, &self.mix) {
            (Some(c), Some(l), Some(MixStage::Vit(m))) => m.forward(f, c.seq, l.seq),
            (Some(c), Some(l), Some(MixStage::Linear(m))) => {
                let x = f.tape.concat_cols(&[c.readout, l.readout]);
                Ok(m.forward(f, x))
            }
            (Some(c), None, None) => Ok(c.readout),
            (None, Some(l), None) => Ok(l.readout),
            _ => Err(Error::Contract("inconsistent detector stages".into())),
        }
    }

    /// Head outputs for one scene. `sample_seed` drives the per-voxel point
    /// sampling.
    pub fn forward(&self, f: &mut Forward, sample: &SceneSample, sample_seed: u64) -> Result<HeadOutput> {
        let r = self.readout(f, sample, sample_seed)?;
        self.head.forward(f, r)
    }

    /// Post-NMS 3D detections in evaluation mode.
    pub fn detect(&self, sample: &SceneSample, nms_iou: f64, max_out: usize) -> Result<DetectionSet<Box3D>> {
        if self.kind == DetectorKind::Camera2d {
            return Err(Error::Contract("the camera pretraining detector emits image-plane boxes".into()));
        }
        let mut f = Forward::inference(&self.store);
        let out = self.forward(&mut f, sample, 0)?;
        Ok(out.detections::<Box3D>(&f)?.nms_per_class(nms_iou, max_out))
    }

    /// Post-NMS image-plane detections of the camera pretraining detector.
    pub fn detect_2d(&self, sample: &SceneSample, nms_iou: f64, max_out: usize) -> Result<DetectionSet<Box2D>> {
        if self.kind != DetectorKind::Camera2d {
            return Err(Error::Contract("only the camera pretraining detector emits image-plane boxes".into()));
        }
        let mut f = Forward::inference(&self.store);
        let out = self.forward(&mut f, sample, 0)?;
        Ok(out.detections::<Box2D>(&f)?.nms_per_class(nms_iou, max_out))
    }

    /// Copies every parameter under `prefix` (for example `"camera."`) from
    /// another model's store. Returns the number of tensors copied.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let n = self.store.copy_prefix_from(other, prefix).map_err(Error::Checkpoint)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!("no parameters under {prefix}")));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SynthConfig};
    use crate::nn::Mode;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        for e in [&mut cfg.camera.encoder, &mut cfg.lidar.encoder, &mut cfg.fusion.encoder] {
            e.width = 16;
            e.heads = 2;
            e.mlp_hidden = 16;
            e.depth = 1;
        }
        cfg.fusion.token_mlp = vec![16];
        cfg.head.num_proposals = 4;
        cfg.head.hidden = vec![8];
        cfg
    }

    #[test]
    fn every_variant_runs_end_to_end() {
        let s = generate_scene(&SynthConfig::toy(), 1).unwrap();
        for strategy in FusionStrategy::ALL {
            for variant in ModelVariant::ALL {
                let mut cfg = tiny();
                cfg.fusion.strategy = strategy;
                cfg.variant = variant;
                let m = Model::new(DetectorKind::Fusion, &cfg, 0).unwrap();
                let mut f = Forward::new(&m.store, Mode::Train, 0);
                let out = m.forward(&mut f, &s, 0).unwrap();
                assert_eq!(f.tape.shape(out.boxes), (4, 7), "{} {}", strategy.label(), variant.label());
                assert_eq!(f.tape.shape(out.probs), (4, 3));
            }
        }
    }

    #[test]
    fn pretraining_detectors_have_matching_prefixes() {
        let cfg = tiny();
        let cam = Model::new(DetectorKind::Camera2d, &cfg, 1).unwrap();
        let lid = Model::new(DetectorKind::Lidar3d, &cfg, 2).unwrap();
        let mut fusion = Model::new(DetectorKind::Fusion, &cfg, 3).unwrap();
        let nc = fusion.load_prefix(&cam.store, "camera.").unwrap();
        let nl = fusion.load_prefix(&lid.store, "lidar.").unwrap();
        assert!(nc > 0 && nl > 0);
        for e in fusion.store.entries() {
            let src = if e.name.starts_with("camera.") {
                &cam.store
            } else if e.name.starts_with("lidar.") {
                &lid.store
            } else {
                continue;
            };
            let id = src.find(&e.name).unwrap();
            assert_eq!(src.get(id), &e.value);
        }
        let s = generate_scene(&SynthConfig::toy(), 0).unwrap();
        assert_eq!(cam.detect_2d(&s, 0.3, 8).unwrap().num_classes(), 2);
        assert!(cam.detect(&s, 0.3, 8).is_err());
        assert!(lid.detect(&s, 0.3, 8).unwrap().len() <= 4);
    }

    #[test]
    fn direct_concat_needs_matching_patch_count() {
        let mut cfg = tiny();
        cfg.fusion.strategy = FusionStrategy::DirectConcat;
        cfg.fusion.direct_camera_tokens = 7;
        assert!(matches!(Model::new(DetectorKind::Fusion, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn variant_labels_are_distinct() {
        let labels: std::collections::BTreeSet<_> = ModelVariant::ALL.iter().map(|v| v.label()).collect();
        assert_eq!(labels.len(), 5);
    }
}
