//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RHRN"            4 bytes magic
//! version           u32 (= 1)
//! fingerprint       32 bytes, SHA-256 of the architecture JSON
//! entry count       u32
//! per entry:
//!   name length     u16, then UTF-8 name
//!   frozen          u8 (0 or 1)
//!   rank            u8, then rank x u32 dims
//!   payload         product(dims) x f32
//! ```

use std::collections::HashMap;
use std::path::Path;

use revhrnet_core::{Scalar, Tensor};

use crate::error::{Result, SegError};
use crate::model::{Parameter, SegModel};
use crate::spec::hex;

pub const MAGIC: &[u8; 4] = b"RHRN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub entries: Vec<CheckpointEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            SegError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_params<'a, T: Scalar>(
        fingerprint: [u8; 32],
        params: impl IntoIterator<Item = &'a Parameter<T>>,
    ) -> Self {
        let entries = params
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                frozen: p.frozen,
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f32().expect("finite")).collect(),
            })
            .collect();
        Self {
            fingerprint,
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| e.data.len() * 4 + e.name.len() + 32).sum();
        let mut out = Vec::with_capacity(44 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(u8::from(e.frozen));
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(SegError::Checkpoint("bad magic; not an RHRN checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(SegError::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().expect("32 bytes");
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashMap::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| SegError::Checkpoint(format!("entry name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let frozen = match r.u8("frozen flag")? {
                0 => false,
                1 => true,
                other => return Err(SegError::Checkpoint(format!("{name}: frozen flag {other}"))),
            };
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(SegError::Checkpoint(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| SegError::Checkpoint(format!("{name}: invalid shape {shape:?}")))?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if seen.insert(name.clone(), ()).is_some() {
                return Err(SegError::Checkpoint(format!("duplicate entry {name}")));
            }
            entries.push(CheckpointEntry {
                name,
                frozen,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(SegError::Checkpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            fingerprint,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SegError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes through a temporary sibling, so an existing file is only
    /// ever replaced by a complete checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| SegError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| SegError::io(path, e))
    }

    /// Copies values and frozen flags into `params`, which must match the
    /// entries one-to-one by name and shape. On any mismatch nothing is
    /// written and every offending name is reported.
    pub fn apply_to<T: Scalar>(&self, mut params: Vec<&mut Parameter<T>>) -> Result<()> {
        let by_name: HashMap<&str, &CheckpointEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut problems = Vec::new();
        for p in &params {
            match by_name.get(p.name.as_str()) {
                None => problems.push(format!("missing {}", p.name)),
                Some(e) if e.shape != p.value.shape() => problems.push(format!(
                    "{}: checkpoint shape {:?} vs model shape {:?}",
                    p.name,
                    e.shape,
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        let known: std::collections::HashSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
        for e in &self.entries {
            if !known.contains(e.name.as_str()) {
                problems.push(format!("unexpected {}", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(SegError::ParamMismatch(problems));
        }
        for p in params.iter_mut() {
            let e = by_name[p.name.as_str()];
            p.value = Tensor::new(&e.shape, e.data.iter().map(|&v| T::lit(f64::from(v))).collect())?;
            p.frozen = e.frozen;
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(model: &SegModel<T>, path: &Path) -> Result<()> {
    Checkpoint::from_params(model.spec().fingerprint(), model.params()).write(path)
}

/// Loads `path` into `model`; the model is untouched unless the whole file
/// parses and matches its architecture fingerprint and parameter table.
pub fn load_checkpoint<T: Scalar>(model: &mut SegModel<T>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::read(path)?;
    let expected = model.spec().fingerprint();
    if ckpt.fingerprint != expected {
        return Err(SegError::FingerprintMismatch {
            expected: hex(&expected),
            found: hex(&ckpt.fingerprint),
        });
    }
    ckpt.apply_to(model.params_mut().collect())
}
