//! Lidar branch: voxelisation, per-voxel point sampling, centroid
//! augmentation, the stacked voxel feature encoder and the point-cloud
//! transformer.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::camera::BranchOutput;
use crate::encoder::{EncoderConfig, TokenEmbedding, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, Forward, Init, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;

/// Axis-aligned sensor range, half-open: `min <= p < max` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Range3 {
    pub const KITTI: Range3 = Range3 {
        min: [2.0, -30.08, -3.0],
        max: [46.8, 30.08, 1.0],
    };

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.max[k] - self.min[k])
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.max[k] + self.min[k]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub range: Range3,
}

impl PointCloud {
    /// Keeps only the points inside `range`.
    pub fn new(points: Vec<[f64; 3]>, range: Range3) -> Self {
        let points = points.into_iter().filter(|p| range.contains(*p)).collect();
        Self { points, range }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub type CellIndex = [i64; 3];

/// Sparse set of non-empty cells; iteration order is lexicographic in the
/// cell index.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub cell_size: [f64; 3],
    pub origin: [f64; 3],
    pub cells: BTreeMap<CellIndex, Vec<[f64; 3]>>,
}

impl VoxelGrid {
    /// Number of non-empty cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn cell_bounds(&self, idx: CellIndex) -> ([f64; 3], [f64; 3]) {
        let lo = [0, 1, 2].map(|k| self.origin[k] + idx[k] as f64 * self.cell_size[k]);
        let hi = [0, 1, 2].map(|k| lo[k] + self.cell_size[k]);
        (lo, hi)
    }
}

pub fn cell_of(p: [f64; 3], origin: [f64; 3], cell_size: [f64; 3]) -> CellIndex {
    [0, 1, 2].map(|k| ((p[k] - origin[k]) / cell_size[k]).floor() as i64)
}

/// Assigns every in-range point to its cell; out-of-range points are dropped.
pub fn voxelize(pc: &PointCloud, cell_size: [f64; 3], range: &Range3) -> Result<VoxelGrid> {
    if cell_size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("voxel sizes must be positive, got {cell_size:?}")));
    }
    let mut cells: BTreeMap<CellIndex, Vec<[f64; 3]>> = BTreeMap::new();
    for &p in pc.points.iter().filter(|p| range.contains(**p)) {
        cells.entry(cell_of(p, range.min, cell_size)).or_default().push(p);
    }
    Ok(VoxelGrid {
        cell_size,
        origin: range.min,
        cells,
    })
}

/// Caps every cell at `max_points` by drawing a uniform subset (kept in its
/// original order). Cells at or under the cap are untouched.
pub fn sample_points(grid: &VoxelGrid, max_points: usize, seed: u64) -> Result<VoxelGrid> {
    if max_points == 0 {
        return Err(Error::Config("per-voxel point cap must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = grid
        .cells
        .iter()
        .map(|(&k, pts)| {
            if pts.len() <= max_points {
                return (k, pts.clone());
            }
            let mut pick = index::sample(&mut rng, pts.len(), max_points).into_vec();
            pick.sort_unstable();
            (k, pick.into_iter().map(|i| pts[i]).collect())
        })
        .collect();
    Ok(VoxelGrid {
        cells,
        ..grid.clone()
    })
}

/// Keeps the `max_voxels` most populated cells; ties keep the
/// lexicographically smaller index.
pub fn cap_voxels(grid: &VoxelGrid, max_voxels: usize) -> VoxelGrid {
    if grid.len() <= max_voxels {
        return grid.clone();
    }
    let mut ranked: Vec<(&CellIndex, usize)> = grid.cells.iter().map(|(k, v)| (k, v.len())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let cells = ranked
        .into_iter()
        .take(max_voxels)
        .map(|(k, _)| (*k, grid.cells[k].clone()))
        .collect();
    VoxelGrid {
        cells,
        ..grid.clone()
    }
}

/// Points of one voxel extended with their offset from the voxel centroid:
/// `(x, y, z, x - cx, y - cy, z - cz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedVoxel {
    pub points: Vec<[f64; 6]>,
    pub centroid: [f64; 3],
}

pub fn augment(points: &[[f64; 3]]) -> Result<AugmentedVoxel> {
    if points.is_empty() {
        return Err(Error::Contract("cannot augment an empty voxel".into()));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let c = c.map(|v| v / n);
    let points = points
        .iter()
        .map(|p| [p[0], p[1], p[2], p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    Ok(AugmentedVoxel { points, centroid: c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelConfig {
    pub cell_size: [f64; 3],
    pub range: Range3,
    /// Per-voxel point cap `T`.
    pub max_points: usize,
    /// Upper bound on the voxel sequence length.
    pub max_voxels: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            cell_size: [0.16, 0.16, 0.16],
            range: Range3::KITTI,
            max_points: 64,
            max_voxels: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VfeConfig {
    /// Widths of the per-point MLP applied to the 6-vectors.
    pub point_mlp: Vec<usize>,
    /// Output width of each FCN before concatenation with its max-pool.
    pub fcn_units: usize,
    /// Number `K` of FCN / max-pool / concat stages.
    pub layers: usize,
    /// Batch norm uses each scene's own statistics at inference instead of
    /// running averages.
    pub per_scene_norm: bool,
}

impl Default for VfeConfig {
    fn default() -> Self {
        Self {
            point_mlp: vec![256, 512, 512],
            fcn_units: 384,
            layers: 6,
            per_scene_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub voxel: VoxelConfig,
    pub vfe: VfeConfig,
    pub encoder: EncoderConfig,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelConfig::default(),
            vfe: VfeConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

/// Voxels flattened for batched encoding: all points stacked in voxel order.
#[derive(Clone, Debug)]
pub struct VoxelBatch {
    pub cells: Vec<CellIndex>,
    pub features: Matrix,
    /// `(first row, point count)` per voxel.
    pub segments: Vec<(usize, usize)>,
    /// Voxel index of every stacked point.
    pub owner: Vec<usize>,
}

impl VoxelBatch {
    pub fn from_voxels(voxels: &[(CellIndex, AugmentedVoxel)]) -> Self {
        let total: usize = voxels.iter().map(|(_, v)| v.points.len()).sum();
        let mut data = Vec::with_capacity(total * 6);
        let mut segments = Vec::with_capacity(voxels.len());
        let mut owner = Vec::with_capacity(total);
        let mut cells = Vec::with_capacity(voxels.len());
        for (i, (k, v)) in voxels.iter().enumerate() {
            segments.push((owner.len(), v.points.len()));
            for p in &v.points {
                data.extend_from_slice(p);
                owner.push(i);
            }
            cells.push(*k);
        }
        Self {
            cells,
            features: Matrix::from_vec(total, 6, data),
            segments,
            owner,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Voxelise, cap, sample and augment a cloud into a [`VoxelBatch`].
pub fn prepare_voxels(pc: &PointCloud, cfg: &VoxelConfig, seed: u64) -> Result<VoxelBatch> {
    let grid = voxelize(pc, cfg.cell_size, &cfg.range)?;
    let grid = cap_voxels(&grid, cfg.max_voxels);
    let grid = sample_points(&grid, cfg.max_points, seed)?;
    let voxels = grid
        .cells
        .iter()
        .map(|(k, pts)| Ok((*k, augment(pts)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(VoxelBatch::from_voxels(&voxels))
}

#[derive(Clone, Debug)]
pub struct FcnLayer {
    pub linear: Linear,
    pub norm: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct VoxelFeatureEncoder {
    pub point_mlp: Mlp,
    pub fcn: Vec<FcnLayer>,
    pub out_dim: usize,
}

impl VoxelFeatureEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &VfeConfig) -> Self {
        let point_mlp = Mlp::new(
            store,
            init,
            &format!("{name}.point_mlp"),
            6,
            &cfg.point_mlp,
            Activation::Gelu,
            true,
        );
        let mut d = point_mlp.out_dim(6);
        let mut fcn = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            fcn.push(FcnLayer {
                linear: Linear::new(store, init, &format!("{name}.fcn{k}.linear"), d, cfg.fcn_units),
                norm: BatchNorm {
                    batch_stats_at_eval: cfg.per_scene_norm,
                    ..BatchNorm::new(store, &format!("{name}.fcn{k}.bn"), cfg.fcn_units)
                },
            });
            d = 2 * cfg.fcn_units;
        }
        Self {
            point_mlp,
            fcn,
            out_dim: d,
        }
    }

    /// Point features after the last concat stage, one row per stacked point.
    pub fn point_features(&self, f: &mut Forward, batch: &VoxelBatch) -> Result<Var> {
        if batch.segments.iter().any(|&(_, n)| n == 0) {
            return Err(Error::Contract("voxel feature encoding of an empty voxel".into()));
        }
        let x = f.tape.constant(batch.features.clone());
        let mut x = self.point_mlp.forward(f, x);
        for layer in &self.fcn {
            let h = layer.linear.forward(f, x);
            let h = layer.norm.forward(f, h);
            let h = f.tape.silu(h);
            let pooled = f.tape.segment_max(h, &batch.segments);
            let spread = f.tape.gather_rows(pooled, &batch.owner);
            x = f.tape.concat_cols(&[h, spread]);
        }
        Ok(x)
    }

    /// One pooled feature per voxel (before the token projection).
    pub fn pooled(&self, f: &mut Forward, batch: &VoxelBatch) -> Result<Var> {
        let x = self.point_features(f, batch)?;
        Ok(f.tape.segment_max(x, &batch.segments))
    }
}

#[derive(Clone, Debug)]
pub struct LidarVit {
    pub cfg: LidarConfig,
    pub vfe: VoxelFeatureEncoder,
    pub embed: TokenEmbedding,
    pub encoder: TransformerEncoder,
}

impl LidarVit {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &LidarConfig) -> Result<Self> {
        if cfg.vfe.layers == 0 {
            return Err(Error::Config("voxel feature encoder needs at least one layer".into()));
        }
        let vfe = VoxelFeatureEncoder::new(store, init, &format!("{name}.vfe"), &cfg.vfe);
        let embed = TokenEmbedding::new(
            store,
            init,
            &format!("{name}.embed"),
            vfe.out_dim,
            cfg.encoder.width,
            cfg.voxel.max_voxels,
        );
        let encoder = TransformerEncoder::new(store, init, &format!("{name}.encoder"), &cfg.encoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            vfe,
            embed,
            encoder,
        })
    }

    /// Projected voxel features (width `D_l`), one row per voxel.
    pub fn vfe_encode(&self, f: &mut Forward, batch: &VoxelBatch) -> Result<Var> {
        let pooled = self.vfe.pooled(f, batch)?;
        Ok(self.embed.projection.forward(f, pooled))
    }

    pub fn encode_cloud(&self, f: &mut Forward, pc: &PointCloud, sample_seed: u64) -> Result<BranchOutput> {
        let batch = prepare_voxels(pc, &self.cfg.voxel, sample_seed)?;
        self.encode_voxels(f, &batch)
    }

    pub fn encode_voxels(&self, f: &mut Forward, batch: &VoxelBatch) -> Result<BranchOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyScene);
        }
        let pooled = self.vfe.pooled(f, batch)?;
        let z0 = self.embed.embed(f, pooled)?;
        let z = self.encoder.encode(f, z0)?;
        let (seq, readout) = self.encoder.finish(f, z)?;
        Ok(BranchOutput { seq, readout })
    }
}
