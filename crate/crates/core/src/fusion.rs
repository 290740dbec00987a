//! Fusion stage: combine camera and lidar token sequences and re-encode them
//! with a third transformer whose class-token readout feeds the detection
//! head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoder::{EncoderConfig, TokenEmbedding, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::{Activation, Forward, Init, Mlp, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Zero-pad the shorter sequence and add element-wise.
    Sum,
    /// Concatenate along the token axis.
    #[default]
    Concat,
    /// Flatten both sequences into one vector and map it with a single MLP.
    DirectConcat,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::Sum, Self::Concat, Self::DirectConcat];

    pub fn label(self) -> &'static str {
        match self {
            Self::Sum => "SUM",
            Self::Concat => "CONCAT",
            Self::DirectConcat => "DIRECT CONCAT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Widths of the shared per-token MLP (hidden widths of the flat MLP for
    /// `DirectConcat`).
    pub token_mlp: Vec<usize>,
    /// Cap `N_m` on the fused sequence length.
    pub max_tokens: usize,
    /// Fixed camera token count expected by `DirectConcat`.
    pub direct_camera_tokens: usize,
    /// Lidar tokens are zero-padded (or truncated) to this count for
    /// `DirectConcat`.
    pub direct_lidar_tokens: usize,
    pub encoder: EncoderConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Concat,
            token_mlp: vec![256, 256, 512, 512, 1024],
            max_tokens: 1024,
            direct_camera_tokens: 48,
            direct_lidar_tokens: 1024 - 48,
            encoder: EncoderConfig {
                width: 1024,
                heads: 16,
                mlp_hidden: 4096,
                ..EncoderConfig::default()
            },
        }
    }
}

impl FusionConfig {
    pub fn direct_tokens(&self) -> usize {
        self.direct_camera_tokens + self.direct_lidar_tokens
    }
}

#[derive(Clone, Debug)]
pub struct MixVit {
    pub cfg: FusionConfig,
    pub input_width: usize,
    pub mlp: Mlp,
    pub token_width: usize,
    pub embed: TokenEmbedding,
    pub encoder: TransformerEncoder,
}

impl MixVit {
    /// `input_width` is the shared width `h` of the two branch sequences.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &FusionConfig,
        input_width: usize,
    ) -> Result<Self> {
        let token_width = cfg.token_mlp.last().copied().unwrap_or(input_width);
        let mlp = match cfg.strategy {
            FusionStrategy::Sum | FusionStrategy::Concat => Mlp::new(
                store,
                init,
                &format!("{name}.token_mlp"),
                input_width,
                &cfg.token_mlp,
                Activation::Gelu,
                true,
            ),
            FusionStrategy::DirectConcat => {
                if cfg.direct_tokens() > cfg.max_tokens {
                    return Err(Error::Config(format!(
                        "direct fusion emits {} tokens, above the cap {}",
                        cfg.direct_tokens(),
                        cfg.max_tokens
                    )));
                }
                let mut widths: Vec<usize> = cfg.token_mlp.iter().take(cfg.token_mlp.len().saturating_sub(1)).copied().collect();
                widths.push(cfg.direct_tokens() * token_width);
                Mlp::new(
                    store,
                    init,
                    &format!("{name}.flat_mlp"),
                    input_width * cfg.direct_tokens(),
                    &widths,
                    Activation::Gelu,
                    true,
                )
            }
        };
        let embed = TokenEmbedding::new(
            store,
            init,
            &format!("{name}.embed"),
            token_width,
            cfg.encoder.width,
            cfg.max_tokens,
        );
        let encoder = TransformerEncoder::new(store, init, &format!("{name}.encoder"), &cfg.encoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            input_width,
            mlp,
            token_width,
            embed,
            encoder,
        })
    }

    /// Fused tokens before the per-token (or flat) MLP.
    pub fn combine(&self, f: &mut Forward, camera: Var, lidar: Var) -> Result<Var> {
        let (nc, hc) = f.tape.shape(camera);
        let (nl, hl) = f.tape.shape(lidar);
        if hc != hl || hc != self.input_width {
            return Err(Error::Config(format!(
                "fusion needs equal widths: camera {hc}, lidar {hl}, expected {}",
                self.input_width
            )));
        }
        let cap = self.cfg.max_tokens;
        match self.cfg.strategy {
            FusionStrategy::Concat => {
                if nc >= cap {
                    return Ok(f.tape.slice_rows(camera, 0, cap));
                }
                let keep = nl.min(cap - nc);
                if keep == 0 {
                    return Ok(camera);
                }
                let lidar = if keep < nl { f.tape.slice_rows(lidar, 0, keep) } else { lidar };
                Ok(f.tape.concat_rows(&[camera, lidar]))
            }
            FusionStrategy::Sum => {
                let n = nc.max(nl);
                let pad = |f: &mut Forward, v: Var, len: usize| {
                    if len < n {
                        let z = f.tape.constant(Matrix::zeros(n - len, hc));
                        f.tape.concat_rows(&[v, z])
                    } else {
                        v
                    }
                };
                let c = pad(f, camera, nc);
                let l = pad(f, lidar, nl);
                let s = f.tape.add(c, l);
                Ok(if n > cap { f.tape.slice_rows(s, 0, cap) } else { s })
            }
            FusionStrategy::DirectConcat => {
                if nc != self.cfg.direct_camera_tokens {
                    return Err(Error::Config(format!(
                        "direct fusion expects {} camera tokens, got {nc}",
                        self.cfg.direct_camera_tokens
                    )));
                }
                let nl_fixed = self.cfg.direct_lidar_tokens;
                let lidar = if nl > nl_fixed {
                    f.tape.slice_rows(lidar, 0, nl_fixed)
                } else if nl < nl_fixed {
                    let z = f.tape.constant(Matrix::zeros(nl_fixed - nl, hc));
                    f.tape.concat_rows(&[lidar, z])
                } else {
                    lidar
                };
                Ok(f.tape.concat_rows(&[camera, lidar]))
            }
        }
    }

    /// Pre-encoder fused tokens of width `token_width`.
    pub fn fuse(&self, f: &mut Forward, camera: Var, lidar: Var) -> Result<Var> {
        let joined = self.combine(f, camera, lidar)?;
        match self.cfg.strategy {
            FusionStrategy::Sum | FusionStrategy::Concat => Ok(self.mlp.forward(f, joined)),
            FusionStrategy::DirectConcat => {
                let (n, h) = f.tape.shape(joined);
                let flat = f.tape.reshape(joined, 1, n * h);
                let out = self.mlp.forward(f, flat);
                let tokens = self.cfg.direct_tokens();
                Ok(f.tape.reshape(out, tokens, self.token_width))
            }
        }
    }

    /// Readout `H_m` of the fused encoder.
    pub fn encode_fused(&self, f: &mut Forward, fused: Var) -> Result<Var> {
        let z0 = self.embed.embed(f, fused)?;
        let z = self.encoder.encode(f, z0)?;
        self.encoder.readout(f, z)
    }

    pub fn forward(&self, f: &mut Forward, camera: Var, lidar: Var) -> Result<Var> {
        let fused = self.fuse(f, camera, lidar)?;
        self.encode_fused(f, fused)
    }
}
