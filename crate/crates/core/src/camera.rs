//! Camera branch: patch extraction, the shared per-patch MLP and the image
//! transformer.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoder::{EncoderConfig, TokenEmbedding, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, Init, Mlp, ParamStore};
use crate::tensor::Matrix;

/// `H × W × 3` image with channel values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Normalises an 8-bit image to `[0, 1]`, replicating the last row and
    /// column until both sides are multiples of the patch size.
    pub fn from_rgb8(img: &RgbImage, patch_h: usize, patch_w: usize) -> Self {
        let (w0, h0) = (img.width() as usize, img.height() as usize);
        let height = h0.div_ceil(patch_h).max(1) * patch_h;
        let width = w0.div_ceil(patch_w).max(1) * patch_w;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let sy = y.min(h0.saturating_sub(1)) as u32;
            for x in 0..width {
                let sx = x.min(w0.saturating_sub(1)) as u32;
                if w0 == 0 || h0 == 0 {
                    data.extend_from_slice(&[0.0; 3]);
                } else {
                    let p = img.get_pixel(sx, sy).0;
                    data.extend(p.iter().map(|&c| f64::from(c) / 255.0));
                }
            }
        }
        Self { height, width, data }
    }

    /// Quantises back to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(self.pixel(y as usize, x as usize).map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    /// Mirror image about the vertical centre line.
    pub fn flipped_horizontally(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self { data, ..*self }
    }

    /// Edge-replicates up to the next multiple of the patch size.
    pub fn padded_to(&self, patch_h: usize, patch_w: usize) -> Self {
        let height = self.height.div_ceil(patch_h).max(1) * patch_h;
        let width = self.width.div_ceil(patch_w).max(1) * patch_w;
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&self.pixel(y.min(self.height - 1), x.min(self.width - 1)));
            }
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Flattened patches in row-major patch order; each row is a
/// `patch_h · patch_w · 3` vector in (row, column, channel) order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patches: Matrix,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

pub fn patchify(img: &ImageTensor, patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    if patch_h == 0 || patch_w == 0 || img.height % patch_h != 0 || img.width % patch_w != 0 {
        return Err(Error::Contract(format!(
            "image {}x{} is not padded to a multiple of the {patch_h}x{patch_w} patch",
            img.height, img.width
        )));
    }
    let (gr, gc) = (img.height / patch_h, img.width / patch_w);
    let plen = patch_h * patch_w * 3;
    let mut patches = Matrix::zeros(gr * gc, plen);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = patches.row_mut(pr * gc + pc);
            for dy in 0..patch_h {
                let y = pr * patch_h + dy;
                let src = (y * img.width + pc * patch_w) * 3;
                row[dy * patch_w * 3..(dy + 1) * patch_w * 3]
                    .copy_from_slice(&img.data[src..src + patch_w * 3]);
            }
        }
    }
    Ok(PatchGrid {
        patch_h,
        patch_w,
        grid_rows: gr,
        grid_cols: gc,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> ImageTensor {
    let (ph, pw) = (grid.patch_h, grid.patch_w);
    let height = grid.grid_rows * ph;
    let width = grid.grid_cols * pw;
    let mut data = vec![0.0; height * width * 3];
    for pr in 0..grid.grid_rows {
        for pc in 0..grid.grid_cols {
            let row = grid.patches.row(pr * grid.grid_cols + pc);
            for dy in 0..ph {
                let y = pr * ph + dy;
                let dst = (y * width + pc * pw) * 3;
                data[dst..dst + pw * 3].copy_from_slice(&row[dy * pw * 3..(dy + 1) * pw * 3]);
            }
        }
    }
    ImageTensor { height, width, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Hidden widths of the per-patch MLP; the token projection maps the
    /// last width to the encoder width.
    pub mlp_widths: Vec<usize>,
    pub max_patches: usize,
    pub encoder: EncoderConfig,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            patch_h: 32,
            patch_w: 32,
            mlp_widths: vec![256, 256, 512],
            max_patches: 1024,
            encoder: EncoderConfig::default(),
        }
    }
}

impl CameraConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }
}

/// Per-branch encoder output: the normalised non-class token sequence and
/// the class-token readout.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub seq: Var,
    pub readout: Var,
}

#[derive(Clone, Debug)]
pub struct CameraVit {
    pub cfg: CameraConfig,
    pub patch_mlp: Mlp,
    pub embed: TokenEmbedding,
    pub encoder: TransformerEncoder,
}

impl CameraVit {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &CameraConfig) -> Result<Self> {
        let patch_mlp = Mlp::new(
            store,
            init,
            &format!("{name}.patch_mlp"),
            cfg.patch_dim(),
            &cfg.mlp_widths,
            Activation::Gelu,
            true,
        );
        let last = patch_mlp.out_dim(cfg.patch_dim());
        let embed = TokenEmbedding::new(
            store,
            init,
            &format!("{name}.embed"),
            last,
            cfg.encoder.width,
            cfg.max_patches,
        );
        let encoder = TransformerEncoder::new(store, init, &format!("{name}.encoder"), &cfg.encoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_mlp,
            embed,
            encoder,
        })
    }

    /// Per-patch features before the transformer.
    pub fn patch_features(&self, f: &mut Forward, grid: &PatchGrid) -> Result<Var> {
        if grid.patches.cols() != self.cfg.patch_dim() {
            return Err(Error::Config(format!(
                "patch vector length {} does not match configured {}",
                grid.patches.cols(),
                self.cfg.patch_dim()
            )));
        }
        let x = f.tape.constant(grid.patches.clone());
        Ok(self.patch_mlp.forward(f, x))
    }

    pub fn encode_image(&self, f: &mut Forward, img: &ImageTensor) -> Result<BranchOutput> {
        let grid = patchify(img, self.cfg.patch_h, self.cfg.patch_w)?;
        self.encode_patches(f, &grid)
    }

    pub fn encode_patches(&self, f: &mut Forward, grid: &PatchGrid) -> Result<BranchOutput> {
        let feats = self.patch_features(f, grid)?;
        let z0 = self.embed.embed(f, feats)?;
        let z = self.encoder.encode(f, z0)?;
        let (seq, readout) = self.encoder.finish(f, z)?;
        Ok(BranchOutput { seq, readout })
    }
}
