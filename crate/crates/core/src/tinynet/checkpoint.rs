//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes   "FDETCKPT"
//! version    u32       1
//! digest     32 bytes  SHA-256 of the canonical config text
//! step       u64
//! count      u32       number of tensors
//! count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32
//!   dims     rank x u64
//!   data     product(dims) x f64
//! ```
//!
//! Model parameters come first in [`Param::ALL`] order, followed by the
//! class centers as `centers` with shape `[2, d]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::Centers;
use crate::matrix::Matrix;

use super::model::{DetectorModel, NetConfig, Param};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FDETCKPT";
pub const VERSION: u32 = 1;
const CENTERS: &str = "centers";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(config_digest: [u8; 32], step: u64, model: &DetectorModel, centers: &Centers) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params()
            .map(|(p, t)| (p.name().to_string(), Tensor::from_vec(t.shape(), t.data().to_vec()).expect("param shape")))
            .collect();
        let c = Tensor::from_vec(&[centers.values.rows(), centers.values.cols()], centers.values.as_slice().to_vec())
            .expect("centers shape");
        tensors.push((CENTERS.to_string(), c));
        Checkpoint {
            config_digest,
            step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is larger than the file")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_digest,
            step,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and centers; shapes must match `config`.
    pub fn restore(&self, config: NetConfig, alpha: f64) -> Result<(DetectorModel, Centers)> {
        let mut params = Vec::with_capacity(Param::ALL.len());
        let mut centers = None;
        for (name, t) in &self.tensors {
            if name == CENTERS {
                let s = t.shape();
                if s.len() != 2 {
                    return Err(Error::Checkpoint("centers must be a matrix".into()));
                }
                centers = Some(Centers::new(Matrix::from_vec(s[0], s[1], t.data().to_vec())?, alpha)?);
            } else {
                params.push((name.clone(), t.clone()));
            }
        }
        let centers = centers.ok_or_else(|| Error::Checkpoint("missing centers".into()))?;
        let model = DetectorModel::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if centers.feature_dim() != model.config.feature_dim {
            return Err(Error::Checkpoint("centers do not match the feature dimension".into()));
        }
        Ok((model, centers))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
