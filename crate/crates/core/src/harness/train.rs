use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Checkpoint, RunConfig};
use crate::autograd::Var;
use crate::data::{augment_scene, Dataset, SceneSample};
use crate::detection::{loss_on_tape, match_predictions, LossBreakdown};
use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D};
use crate::model::{DetectorKind, Model};
use crate::nn::{apply_bn_updates, Adam, Forward, Mode, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Camera branch with an image-plane head.
    Camera2d,
    /// Lidar branch with a 3D head.
    Lidar3d,
    /// Full detector from scratch.
    Fusion,
    /// Full detector with both branches loaded from pretraining checkpoints.
    FusionPretrained,
}

impl TrainMode {
    pub fn kind(self) -> DetectorKind {
        match self {
            TrainMode::Camera2d => DetectorKind::Camera2d,
            TrainMode::Lidar3d => DetectorKind::Lidar3d,
            TrainMode::Fusion | TrainMode::FusionPretrained => DetectorKind::Fusion,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Camera2d => "camera2d",
            TrainMode::Lidar3d => "lidar3d",
            TrainMode::Fusion => "fusion",
            TrainMode::FusionPretrained => "fusion_pretrained",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Camera2d, Self::Lidar3d, Self::Fusion, Self::FusionPretrained]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s}")))
    }
}

/// Branch checkpoints for [`TrainMode::FusionPretrained`].
#[derive(Clone, Copy, Debug)]
pub struct Pretrained<'a> {
    pub camera: &'a Checkpoint,
    pub lidar: &'a Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub map_3d: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    /// Batch-mean loss of every step.
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    /// First evaluation step at which the mAP target was met.
    pub steps_to_target: Option<usize>,
    pub steps_run: usize,
}

/// SplitMix64 finaliser over a running hash of `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = parts.first().copied().unwrap_or_default();
    let fields = |b: &LossBreakdown| [b.total, b.cls, b.center, b.size, b.heading, b.corner];
    let mut sums = [0.0; 6];
    for b in parts {
        for (s, v) in sums.iter_mut().zip(fields(b)) {
            *s += v;
        }
    }
    [m.total, m.cls, m.center, m.size, m.heading, m.corner] = sums.map(|s| s / n);
    m
}

/// Scene order: a fresh seed-determined permutation every epoch.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Loss of one scene on a fresh training tape.
fn scene_loss(f: &mut Forward, model: &Model, cfg: &RunConfig, s: &SceneSample, sample_seed: u64) -> Result<(Var, LossBreakdown)> {
    let out = model.forward(f, s, sample_seed)?;
    let (cw, bw) = (cfg.loss.match_class_weight, cfg.loss.match_box_weight);
    match model.kind {
        DetectorKind::Camera2d => {
            let gt = s.gt_2d(cfg.train.min_box_area_2d);
            let preds = out.detections::<Box2D>(f)?;
            let a = match_predictions(&preds, &gt, cw, bw)?;
            loss_on_tape(f, &out, &gt, &a, &cfg.loss)
        }
        _ => {
            let preds = out.detections::<Box3D>(f)?;
            let a = match_predictions(&preds, &s.gt, cw, bw)?;
            loss_on_tape(f, &out, &s.gt, &a, &cfg.loss)
        }
    }
}

fn diagnostic(step: usize, scenes: &[&SceneSample], loss: &LossBreakdown, what: &str) -> Error {
    let ids: Vec<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
    let objects: Vec<usize> = scenes.iter().map(|s| s.gt.len()).collect();
    let points: Vec<usize> = scenes.iter().map(|s| s.cloud.len()).collect();
    Error::NonFinite {
        step,
        detail: format!("{what}; scenes {ids:?}, objects {objects:?}, points {points:?}, loss {loss:?}"),
    }
}

/// Trains one detector on `data`, evaluating on the same scenes when the
/// config asks for it. Fully determined by the config seed.
pub fn train(cfg: &RunConfig, mode: TrainMode, data: &Dataset, pretrained: Option<Pretrained>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::new(mode.kind(), &cfg.model, cfg.seed)?;
    match (mode, pretrained) {
        (TrainMode::FusionPretrained, Some(p)) => {
            if p.camera.kind != DetectorKind::Camera2d || p.lidar.kind != DetectorKind::Lidar3d {
                return Err(Error::Checkpoint("pretrained checkpoints must be camera2d and lidar3d".into()));
            }
            model.load_prefix(&p.camera.store, "camera.")?;
            model.load_prefix(&p.lidar.store, "lidar.")?;
            if cfg.train.pretrained_head {
                model.load_prefix(&p.lidar.store, "head.")?;
            }
        }
        (TrainMode::FusionPretrained, None) => {
            return Err(Error::Config("fusion_pretrained needs camera and lidar checkpoints".into()));
        }
        (_, Some(_)) => return Err(Error::Config(format!("mode {mode} takes no pretrained checkpoints"))),
        (_, None) => {}
    }

    let t = &cfg.train;
    let clip = (t.clip_norm > 0.0).then_some(t.clip_norm);
    let mut adam = Adam::new(t.lr, clip);
    if mode == TrainMode::FusionPretrained {
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = &model.store.entry(id).name;
            if name.starts_with("camera.") || name.starts_with("lidar.") {
                adam.set_lr_scale(id, t.pretrained_lr_scale);
            }
        }
    }
    let mut batches = BatchStream::new(data.len(), derive_seed(cfg.seed, &[1]));
    let mut losses = Vec::with_capacity(t.steps);
    let mut evals = Vec::new();
    let mut steps_to_target = None;
    let mut steps_run = 0;

    for step in 0..t.steps {
        let idx = batches.next(t.batch_size);
        let scenes: Vec<Cow<SceneSample>> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = &data.samples[i];
                if cfg.data.augment {
                    let seed = derive_seed(cfg.seed, &[2, step as u64, j as u64]);
                    augment_scene(s, &cfg.data.augmentation, seed).map(Cow::Owned)
                } else {
                    Ok(Cow::Borrowed(s))
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&SceneSample> = scenes.iter().map(|c| c.as_ref()).collect();

        let mut grads = ParamGrads::zeros_like(&model.store);
        let mut bn = Vec::new();
        let mut parts = Vec::with_capacity(refs.len());
        for (j, s) in refs.iter().enumerate() {
            let mut f = Forward::new(&model.store, Mode::Train, derive_seed(cfg.seed, &[3, step as u64, j as u64]));
            let sample_seed = derive_seed(cfg.seed, &[4, step as u64, j as u64]);
            let (loss, br) = scene_loss(&mut f, &model, cfg, s, sample_seed)?;
            if !br.total.is_finite() {
                return Err(diagnostic(step, &refs, &br, "non-finite loss"));
            }
            let g = f.gradients(loss);
            if !g.all_finite() {
                return Err(diagnostic(step, &refs, &br, "non-finite gradient"));
            }
            grads.accumulate(&g);
            bn.extend(f.take_bn_updates());
            parts.push(br);
        }
        grads.scale(1.0 / refs.len() as f64);
        adam.lr = t.lr_at(step);
        adam.update(&mut model.store, &grads);
        apply_bn_updates(&mut model.store, &bn);
        let mean = mean_breakdown(&parts);
        if t.log_every > 0 && step % t.log_every == 0 {
            log::info!(
                "{mode} step {step}: loss {:.5} (cls {:.5}, centre {:.5}, size {:.5}, heading {:.5}, corner {:.5})",
                mean.total,
                mean.cls,
                mean.center,
                mean.size,
                mean.heading,
                mean.corner
            );
        }
        losses.push(mean);
        steps_run = step + 1;

        if model.kind != DetectorKind::Camera2d && t.eval_every > 0 && steps_run % t.eval_every == 0 {
            let report = evaluate(&model, data, &cfg.eval)?;
            let map_3d = report.map_3d("overall").unwrap_or(0.0);
            log::info!("{mode} step {steps_run}: mAP_3D {map_3d:.4}");
            evals.push(EvalPoint { step: steps_run, map_3d });
            if t.target_map_3d > 0.0 && map_3d >= t.target_map_3d {
                steps_to_target = Some(steps_run);
                break;
            }
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, cfg, steps_run as u64),
        model,
        losses,
        evals,
        steps_to_target,
        steps_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::DataSource;

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::toy();
        for e in [
            &mut cfg.model.camera.encoder,
            &mut cfg.model.lidar.encoder,
            &mut cfg.model.fusion.encoder,
        ] {
            e.width = 16;
            e.heads = 2;
            e.mlp_hidden = 16;
            e.depth = 1;
            e.dropout = 0.1;
        }
        cfg.model.fusion.token_mlp = vec![16];
        cfg.model.head.num_proposals = 4;
        cfg.model.head.hidden = vec![8];
        cfg.train.steps = 3;
        cfg.train.eval_every = 0;
        cfg.data.augment = true;
        cfg.data.source = DataSource::Synthetic {
            count: 3,
            seed: 0,
            synth: crate::data::SynthConfig::toy(),
        };
        let data = cfg.load_dataset().unwrap();
        (cfg, data)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny();
        let a = train(&cfg, TrainMode::Fusion, &data, None).unwrap();
        let b = train(&cfg, TrainMode::Fusion, &data, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn one_step_touches_every_trainable_tensor() {
        let (mut cfg, data) = tiny();
        cfg.train.steps = 1;
        for mode in [TrainMode::Fusion, TrainMode::Lidar3d, TrainMode::Camera2d] {
            let before = Model::new(mode.kind(), &cfg.model, cfg.seed).unwrap();
            let after = train(&cfg, mode, &data, None).unwrap().model;
            for (a, b) in before.store.entries().iter().zip(after.store.entries()) {
                if a.trainable {
                    assert_ne!(a.value, b.value, "{mode}: {} unchanged", a.name);
                }
            }
        }
    }

    #[test]
    fn pretrained_mode_requires_checkpoints() {
        let (cfg, data) = tiny();
        assert!(matches!(train(&cfg, TrainMode::FusionPretrained, &data, None), Err(Error::Config(_))));
    }

    #[test]
    fn pretrained_branches_are_loaded_before_training() {
        let (mut cfg, data) = tiny();
        cfg.train.steps = 1;
        let cam = train(&cfg, TrainMode::Camera2d, &data, None).unwrap().checkpoint;
        let lid = train(&cfg, TrainMode::Lidar3d, &data, None).unwrap().checkpoint;
        cfg.train.steps = 0;
        let p = Pretrained {
            camera: &cam,
            lidar: &lid,
        };
        let fused = train(&cfg, TrainMode::FusionPretrained, &data, Some(p)).unwrap().model;
        for e in fused.store.entries() {
            let src = match e.name.split('.').next() {
                Some("camera") => &cam.store,
                Some("lidar" | "head") => &lid.store,
                _ => continue,
            };
            assert_eq!(src.get(src.find(&e.name).unwrap()), &e.value);
        }
    }

    #[test]
    fn zero_branch_rate_freezes_pretrained_branches() {
        let (mut cfg, data) = tiny();
        cfg.train.steps = 1;
        let cam = train(&cfg, TrainMode::Camera2d, &data, None).unwrap().checkpoint;
        let lid = train(&cfg, TrainMode::Lidar3d, &data, None).unwrap().checkpoint;
        cfg.train.steps = 2;
        cfg.train.pretrained_lr_scale = 0.0;
        cfg.train.pretrained_head = false;
        let p = Pretrained {
            camera: &cam,
            lidar: &lid,
        };
        let fused = train(&cfg, TrainMode::FusionPretrained, &data, Some(p)).unwrap().model;
        let fresh = Model::new(DetectorKind::Fusion, &cfg.model, cfg.seed).unwrap();
        for (e, f) in fused.store.entries().iter().zip(fresh.store.entries()) {
            match e.name.split('.').next() {
                Some("camera") => assert_eq!(&e.value, cam.store.get(cam.store.find(&e.name).unwrap())),
                Some("lidar") if e.trainable => assert_eq!(&e.value, lid.store.get(lid.store.find(&e.name).unwrap())),
                Some("mix" | "head") if e.trainable => assert_ne!(e.value, f.value, "{}", e.name),
                _ => {}
            }
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in [TrainMode::Camera2d, TrainMode::Lidar3d, TrainMode::Fusion, TrainMode::FusionPretrained] {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_part() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(5, &[3]), derive_seed(5, &[3]));
    }
}
