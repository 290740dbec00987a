use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Yaw is drawn from `U(-max, max)`.
    pub max_rotation: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
    pub translate_prob: f64,
    /// Per-axis standard deviation in metres.
    pub translate_std: f64,
    pub shuffle: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 0.5,
            max_rotation: std::f64::consts::FRAC_PI_4,
            scale_prob: 0.5,
            scale_range: [0.95, 1.05],
            translate_prob: 0.5,
            translate_std: 0.2,
            shuffle: true,
        }
    }
}

impl AugmentConfig {
    /// Only the point-order shuffle.
    pub fn shuffle_only() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            scale_prob: 0.0,
            translate_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.rotate_prob, self.scale_prob, self.translate_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if !(self.max_rotation >= 0.0) || !(self.translate_std >= 0.0) {
            return Err(Error::Config("rotation and translation spreads must be non-negative".into()));
        }
        Ok(())
    }
}

fn map_scene(s: &SceneSample, point: impl Fn([f64; 3]) -> [f64; 3], boxes: impl Fn(&Box3D) -> Box3D) -> SceneSample {
    let mut out = s.clone();
    for p in &mut out.cloud.points {
        *p = point(*p);
    }
    for b in &mut out.gt.boxes {
        *b = boxes(b);
    }
    out
}

/// Mirror about the lidar x-axis (`y → -y`), including the image.
pub fn flip_scene(s: &SceneSample) -> SceneSample {
    let mut out = map_scene(
        s,
        |p| [p[0], -p[1], p[2]],
        |b| Box3D {
            cy: -b.cy,
            theta: wrap_angle(-b.theta),
            ..*b
        },
    );
    out.image = s.image.flipped_horizontally();
    out
}

fn rotate_scene(s: &SceneSample, angle: f64) -> SceneSample {
    let (sn, cs) = angle.sin_cos();
    let rot = move |x: f64, y: f64| (cs * x - sn * y, sn * x + cs * y);
    map_scene(
        s,
        |p| {
            let (x, y) = rot(p[0], p[1]);
            [x, y, p[2]]
        },
        |b| {
            let (x, y) = rot(b.cx, b.cy);
            Box3D {
                cx: x,
                cy: y,
                theta: wrap_angle(b.theta + angle),
                ..*b
            }
        },
    )
}

fn scale_scene(s: &SceneSample, k: f64) -> SceneSample {
    map_scene(
        s,
        |p| p.map(|v| v * k),
        |b| Box3D {
            cx: b.cx * k,
            cy: b.cy * k,
            cz: b.cz * k,
            l: b.l * k,
            w: b.w * k,
            h: b.h * k,
            theta: b.theta,
        },
    )
}

fn translate_scene(s: &SceneSample, t: [f64; 3]) -> SceneSample {
    map_scene(
        s,
        |p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]],
        |b| Box3D {
            cx: b.cx + t[0],
            cy: b.cy + t[1],
            cz: b.cz + t[2],
            ..*b
        },
    )
}

/// Random global transforms applied jointly to points and boxes, then a
/// point shuffle. Every draw is made regardless of whether its transform
/// fires, so the stream of draws depends on the seed alone.
pub fn augment_scene(s: &SceneSample, cfg: &AugmentConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fire: [bool; 4] = [cfg.flip_prob, cfg.rotate_prob, cfg.scale_prob, cfg.translate_prob].map(|p| rng.random::<f64>() < p);
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation;
    let scale = cfg.scale_range[0] + rng.random::<f64>() * (cfg.scale_range[1] - cfg.scale_range[0]);
    let normal = Normal::new(0.0, cfg.translate_std).map_err(|e| Error::Config(e.to_string()))?;
    let shift = [0, 1, 2].map(|_| normal.sample(&mut rng));

    let mut out = s.clone();
    if fire[0] {
        out = flip_scene(&out);
    }
    if fire[1] {
        out = rotate_scene(&out, angle);
    }
    if fire[2] {
        out = scale_scene(&out, scale);
    }
    if fire[3] {
        out = translate_scene(&out, shift);
    }
    if cfg.shuffle {
        out.cloud.points.shuffle(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SynthConfig, CONTAINMENT_MARGIN};

    fn sorted(mut v: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn shuffle_only_keeps_geometry() {
        let s = generate_scene(&SynthConfig::toy(), 2).unwrap();
        let a = augment_scene(&s, &AugmentConfig::shuffle_only(), 9).unwrap();
        assert_eq!(a.gt, s.gt);
        assert_eq!(a.image, s.image);
        assert_ne!(a.cloud.points, s.cloud.points);
        assert_eq!(sorted(a.cloud.points), sorted(s.cloud.points.clone()));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_scene(&SynthConfig::toy(), 5).unwrap();
        assert_eq!(flip_scene(&flip_scene(&s)), s);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let s = generate_scene(&SynthConfig::toy(), 5).unwrap();
        let cfg = AugmentConfig::default();
        assert_eq!(augment_scene(&s, &cfg, 4).unwrap(), augment_scene(&s, &cfg, 4).unwrap());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let s = generate_scene(&SynthConfig::toy(), 5).unwrap();
        let cfg = AugmentConfig {
            flip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(augment_scene(&s, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn containment_survives_every_transform() {
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            rotate_prob: 1.0,
            scale_prob: 1.0,
            translate_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let s = generate_scene(&SynthConfig::toy(), seed).unwrap();
            let before: Vec<Vec<usize>> = s
                .gt
                .boxes
                .iter()
                .map(|b| (0..s.cloud.len()).filter(|&i| b.contains(s.cloud.points[i], CONTAINMENT_MARGIN)).collect())
                .collect();
            let a = augment_scene(&s, &cfg, seed + 100).unwrap();
            assert_eq!(a.gt.labels, s.gt.labels);
            for (b, inside) in a.gt.boxes.iter().zip(&before) {
                assert_eq!(a.points_in_box(b), inside.len());
            }
        }
    }
}
