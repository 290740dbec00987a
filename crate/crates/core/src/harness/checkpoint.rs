use std::io::{Read, Write};
use std::path::Path;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{DetectorKind, Model};
use crate::nn::ParamStore;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"FVIT";
const VERSION: u32 = 1;

/// Trained parameters with the configuration that produced them.
///
/// Binary layout, little endian: magic `FVIT`, `u32` version, `u32`-prefixed
/// TOML config, `u8` detector kind, `u64` step count, `u32` tensor count,
/// then per tensor a `u32`-prefixed name, `u8` trainable flag, `u32` rows,
/// `u32` cols and the raw `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub kind: DetectorKind,
    pub steps: u64,
    pub store: ParamStore,
}

fn kind_code(k: DetectorKind) -> u8 {
    match k {
        DetectorKind::Camera2d => 0,
        DetectorKind::Lidar3d => 1,
        DetectorKind::Fusion => 2,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, steps: u64) -> Self {
        Self {
            config: config.clone(),
            kind: model.kind,
            steps,
            store: model.store.clone(),
        }
    }

    /// Rebuilds the network from the embedded config and installs every
    /// stored tensor. Names and shapes must match exactly.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.kind, &self.config.model, self.config.seed)?;
        if model.store.len() != self.store.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, the network has {}",
                self.store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.entry(id).name.clone();
            let src = self.store.find(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let value = self.store.get(src);
            if value.shape() != model.store.get(id).shape() {
                return Err(bad(format!("shape mismatch for {name}")));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.push(kind_code(self.kind));
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for e in self.store.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.trainable as u8);
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = RunConfig::from_toml(&r.string()?)?;
        let kind = match r.u8()? {
            0 => DetectorKind::Camera2d,
            1 => DetectorKind::Lidar3d,
            2 => DetectorKind::Fusion,
            k => return Err(bad(format!("unknown detector kind {k}"))),
        };
        let steps = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let bytes = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("tensor too large"))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if store.find(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            store.add(name, Matrix::from_vec(rows, cols, data), trainable);
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            kind,
            steps,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
