use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{project_box, Calibration, Dataset, ObjectClass, SceneSample};
use crate::camera::ImageTensor;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::lidar::{PointCloud, Range3};

/// File locations of one KITTI frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KittiPaths {
    pub velodyne: PathBuf,
    pub label: PathBuf,
    pub calib: PathBuf,
    pub image: PathBuf,
}

impl KittiPaths {
    /// Standard `velodyne/`, `label_2/`, `calib/`, `image_2/` layout.
    pub fn in_dir(root: &Path, index: usize) -> Self {
        let stem = format!("{index:06}");
        Self {
            velodyne: root.join("velodyne").join(format!("{stem}.bin")),
            label: root.join("label_2").join(format!("{stem}.txt")),
            calib: root.join("calib").join(format!("{stem}.txt")),
            image: root.join("image_2").join(format!("{stem}.png")),
        }
    }
}

/// One row of a KITTI label file, in the rectified camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// `(h, w, l)` in metres.
    pub dims: [f64; 3],
    /// Bottom-face centre.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn to_lidar_box(&self, calib: &Calibration) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        let c = calib.rect_to_lidar([x, y - 0.5 * h, z])?;
        Box3D::new(c[0], c[1], c[2], l, w, h, -self.rotation_y - std::f64::consts::FRAC_PI_2)
    }

    pub fn from_lidar_box(b: &Box3D, class: ObjectClass, calib: &Calibration, image: (usize, usize)) -> Self {
        let c = calib.lidar_to_rect(b.center());
        let location = [c[0], c[1] + 0.5 * b.h, c[2]];
        let rotation_y = wrap_angle(-b.theta - std::f64::consts::FRAC_PI_2);
        let bbox = project_box(calib, b).map_or([0.0; 4], |r| {
            let (w, h) = (image.0 as f64, image.1 as f64);
            [r[0].clamp(0.0, w), r[1].clamp(0.0, h), r[2].clamp(0.0, w), r[3].clamp(0.0, h)]
        });
        Self {
            kind: class.kitti_name().to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: wrap_angle(rotation_y - location[0].atan2(location[2])),
            bbox,
            dims: [b.h, b.w, b.l],
            location,
            rotation_y,
        }
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_floats(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| parse_error(path, line, format!("bad number {f:?}: {e}")))
        })
        .collect()
}

/// Parses label rows; `path` is only used in error messages.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, row) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = row.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 && fields.len() != 16 {
            return Err(parse_error(path, line, format!("expected 15 fields, found {}", fields.len())));
        }
        let v = parse_floats(&fields[1..15], path, line)?;
        let occlusion = fields[2]
            .parse::<i32>()
            .map_err(|e| parse_error(path, line, format!("bad occlusion {:?}: {e}", fields[2])))?;
        out.push(KittiLabel {
            kind: fields[0].to_string(),
            truncation: v[0],
            occlusion,
            alpha: v[2],
            bbox: [v[3], v[4], v[5], v[6]],
            dims: [v[7], v[8], v[9]],
            location: [v[10], v[11], v[12]],
            rotation_y: v[13],
        });
    }
    Ok(out)
}

pub fn write_labels(labels: &[KittiLabel]) -> String {
    let mut s = String::new();
    for l in labels {
        let nums = [
            l.alpha,
            l.bbox[0],
            l.bbox[1],
            l.bbox[2],
            l.bbox[3],
            l.dims[0],
            l.dims[1],
            l.dims[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.rotation_y,
        ];
        let _ = write!(s, "{} {} {}", l.kind, l.truncation, l.occlusion);
        for n in nums {
            let _ = write!(s, " {n}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_calibration(text: &str, path: &Path) -> Result<Calibration> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (i, row) in text.lines().enumerate() {
        let Some((key, rest)) = row.split_once(':') else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let want = match key.trim() {
            "P2" | "Tr_velo_to_cam" => 12,
            "R0_rect" => 9,
            _ => continue,
        };
        if fields.len() != want {
            return Err(parse_error(path, i + 1, format!("{key} needs {want} values, found {}", fields.len())));
        }
        let v = parse_floats(&fields, path, i + 1)?;
        match key.trim() {
            "P2" => p2 = Some([0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]])),
            "Tr_velo_to_cam" => tr = Some([0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]])),
            _ => r0 = Some([0, 1, 2].map(|r| [v[3 * r], v[3 * r + 1], v[3 * r + 2]])),
        }
    }
    let missing = |k: &str| Error::Ingest(format!("{}: missing {k}", path.display()));
    Ok(Calibration {
        p2: p2.ok_or_else(|| missing("P2"))?,
        r0_rect: r0.ok_or_else(|| missing("R0_rect"))?,
        tr_velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
    })
}

pub fn write_calibration(c: &Calibration) -> String {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let p2: Vec<f64> = c.p2.iter().flatten().copied().collect();
    let r0: Vec<f64> = c.r0_rect.iter().flatten().copied().collect();
    let tr: Vec<f64> = c.tr_velo_to_cam.iter().flatten().copied().collect();
    let mut s = String::new();
    for k in ["P0", "P1", "P2", "P3"] {
        let _ = writeln!(s, "{k}: {}", join(&p2));
    }
    let _ = writeln!(s, "R0_rect: {}", join(&r0));
    let _ = writeln!(s, "Tr_velo_to_cam: {}", join(&tr));
    let _ = writeln!(s, "Tr_imu_to_velo: {}", join(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    s
}

/// Reads `(x, y, z, intensity)` little-endian `f32` quadruples, dropping
/// the intensity.
pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Ingest(format!(
            "{}: {} bytes is not a whole number of 16-byte points",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |k: usize| f64::from(f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]));
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// Writes points as `f32` quadruples with zero intensity.
pub fn write_points(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p[0], p[1], p[2], 0.0] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads one frame. Classes other than cars and pedestrians are dropped,
/// as are boxes outside `range` or holding no point.
pub fn load_kitti(paths: &KittiPaths, range: &Range3) -> Result<SceneSample> {
    let cloud = PointCloud::new(read_points(&paths.velodyne)?, *range);
    let calibration = parse_calibration(&fs::read_to_string(&paths.calib)?, &paths.calib)?;
    let labels = parse_labels(&fs::read_to_string(&paths.label)?, &paths.label)?;
    let img = image::open(&paths.image)?.to_rgb8();
    let mut sample = SceneSample {
        scene_id: paths
            .velodyne
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        image: ImageTensor::from_rgb8(&img, 1, 1),
        cloud,
        calibration,
        gt: GroundTruth::empty(),
        placement_shortfall: false,
    };
    for l in &labels {
        let Some(class) = ObjectClass::from_kitti(&l.kind) else {
            continue;
        };
        let b = l.to_lidar_box(&sample.calibration)?;
        if range.contains(b.center()) && sample.points_in_box(&b) > 0 {
            sample.gt.boxes.push(b);
            sample.gt.labels.push(class.index());
        }
    }
    Ok(sample)
}

/// Every frame under `root`, ordered by file name.
pub fn load_kitti_dir(root: &Path, range: &Range3) -> Result<Dataset> {
    let mut stems: Vec<String> = fs::read_dir(root.join("velodyne"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "bin") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    let samples = stems
        .iter()
        .map(|s| {
            let index: usize = s
                .parse()
                .map_err(|_| Error::Ingest(format!("frame name {s:?} is not numeric")))?;
            load_kitti(&KittiPaths::in_dir(root, index), range)
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { samples })
}

/// Writes every sample as a numbered frame under `root`.
pub fn write_kitti_dir(root: &Path, data: &Dataset) -> Result<()> {
    for sub in ["velodyne", "label_2", "calib", "image_2"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for (i, s) in data.samples.iter().enumerate() {
        let paths = KittiPaths::in_dir(root, i);
        write_points(&paths.velodyne, &s.cloud.points)?;
        fs::write(&paths.calib, write_calibration(&s.calibration))?;
        let labels: Vec<KittiLabel> = s
            .gt
            .boxes
            .iter()
            .zip(&s.gt.labels)
            .filter_map(|(b, &c)| {
                ObjectClass::from_index(c)
                    .map(|c| KittiLabel::from_lidar_box(b, c, &s.calibration, (s.image.width, s.image.height)))
            })
            .collect();
        fs::write(&paths.label, write_labels(&labels))?;
        s.image.to_rgb8().save(&paths.image)?;
    }
    Ok(())
}
