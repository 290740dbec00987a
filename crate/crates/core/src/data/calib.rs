use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KITTI-style projection chain: lidar → reference camera (`Tr_velo_to_cam`),
/// reference → rectified camera (`R0_rect`), rectified → pixels (`P2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

/// Inverse of a 3×3 matrix by cofactors.
pub fn inverse3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    if det.abs() < 1e-12 {
        return Err(Error::Ingest("singular calibration matrix".into()));
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = c(k, r) / det;
        }
    }
    Ok(inv)
}

fn mul3(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

impl Calibration {
    /// Pinhole camera looking along lidar `+x` with lidar `+y` to the left
    /// and `+z` up, principal point at the image centre.
    pub fn forward_pinhole(focal: f64, width: usize, height: usize) -> Self {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        Self {
            p2: [[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        }
    }

    fn tr_rotation(&self) -> [[f64; 3]; 3] {
        self.tr_velo_to_cam.map(|r| [r[0], r[1], r[2]])
    }

    pub fn lidar_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.tr_velo_to_cam;
        let cam = [0, 1, 2].map(|r| t[r][0] * p[0] + t[r][1] * p[1] + t[r][2] * p[2] + t[r][3]);
        mul3(&self.r0_rect, cam)
    }

    pub fn rect_to_lidar(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let cam = mul3(&inverse3(&self.r0_rect)?, p);
        let t = &self.tr_velo_to_cam;
        let shifted = [cam[0] - t[0][3], cam[1] - t[1][3], cam[2] - t[2][3]];
        Ok(mul3(&inverse3(&self.tr_rotation())?, shifted))
    }

    /// Pixel `(u, v)` and depth of a lidar-frame point, or `None` when the
    /// point is not in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let r = self.lidar_to_rect(p);
        let q = [0, 1, 2].map(|k| self.p2[k][0] * r[0] + self.p2[k][1] * r[1] + self.p2[k][2] * r[2] + self.p2[k][3]);
        if q[2] <= 1e-6 {
            return None;
        }
        Some([q[0] / q[2], q[1] / q[2], q[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinhole_axes() {
        let c = Calibration::forward_pinhole(32.0, 64, 32);
        assert_eq!(c.lidar_to_rect([5.0, 1.0, 2.0]), [-1.0, -2.0, 5.0]);
        let [u, v, d] = c.project([10.0, 0.0, 0.0]).unwrap();
        assert_eq!((u, v, d), (32.0, 16.0, 10.0));
        // left of the camera projects to smaller u, above to smaller v
        assert!(c.project([10.0, 2.0, 0.0]).unwrap()[0] < 32.0);
        assert!(c.project([10.0, 0.0, 1.0]).unwrap()[1] < 16.0);
        assert!(c.project([-1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rect_lidar_round_trip_general() {
        let c = Calibration {
            p2: [[700.0, 0.0, 600.0, 45.0], [0.0, 700.0, 170.0, -0.3], [0.0, 0.0, 1.0, 0.005]],
            r0_rect: [[0.9999, 0.0098, -0.0074], [-0.0099, 0.9999, -0.0043], [0.0074, 0.0044, 1.0]],
            tr_velo_to_cam: [
                [0.0075, -0.9999, -0.0006, -0.0041],
                [0.0148, 0.0007, -0.9999, -0.0763],
                [0.9999, 0.0075, 0.0148, -0.2718],
            ],
        };
        let p = [12.3, -4.5, 0.7];
        let back = c.rect_to_lidar(c.lidar_to_rect(p)).unwrap();
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(inverse3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
    }
}
