//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"PCAECKPT"
//! version  u32
//! config   u32 length + UTF-8 JSON of the ModelConfig (variant included)
//! count    u32 number of arrays
//! array*   u16 name length, name bytes, u8 dtype (1 = f64, 2 = f32),
//!          u8 rank, rank × u64 dims, raw element bytes
//! ```
//!
//! Weights are stored under their parameter names; batch-norm running
//! statistics as `<layer>.bn.running_mean` and `<layer>.bn.running_var`.
//! The file is parsed completely before any model is built, so a damaged
//! file never yields a partially loaded model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PCAECKPT";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

/// A stored array before it is matched against the model.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn arrays_of(model: &Model) -> Vec<StoredArray> {
    let mut out: Vec<StoredArray> = model
        .params()
        .iter()
        .map(|p| StoredArray {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    for r in model.running_stats() {
        for (suffix, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
            out.push(StoredArray {
                name: format!("{}.{suffix}", r.name),
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
    }
    out
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let arrays = arrays_of(model);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in &arrays {
        let name = a.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(DTYPE_F64);
        buf.push(a.shape.len() as u8);
        for &d in &a.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    // write-then-rename keeps an existing checkpoint intact if writing fails
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint {
                array: what.to_string(),
                reason: "file truncated".into(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn header_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        array: "<header>".into(),
        reason: reason.into(),
    }
}

/// Parses a checkpoint into its configuration and raw arrays.
pub fn parse(bytes: &[u8]) -> Result<(ModelConfig, Vec<StoredArray>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "<header>")? != MAGIC {
        return Err(header_err("bad magic"));
    }
    let version = r.u32("<header>")?;
    if version != VERSION {
        return Err(header_err(format!("version {version}, expected {VERSION}")));
    }
    let len = r.u32("<header>")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "<header>")?)
        .map_err(|e| header_err(format!("config: {e}")))?;
    let count = r.u32("<header>")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for i in 0..count {
        let placeholder = format!("<array {i}>");
        let len = r.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(len, &placeholder)?)
            .map_err(|_| Error::Checkpoint {
                array: placeholder.clone(),
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let dtype = r.u8(&name)?;
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint {
                array: name.clone(),
                reason: "shape overflows".into(),
            })?;
        let data = match dtype {
            DTYPE_F64 => r
                .take(n.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(n.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => {
                return Err(Error::Checkpoint {
                    array: name,
                    reason: format!("unknown element type {other}"),
                })
            }
        };
        arrays.push(StoredArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(header_err("trailing bytes after the last array"));
    }
    Ok((config, arrays))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (config, arrays) = parse(bytes)?;
    let mut by_name: HashMap<String, StoredArray> = HashMap::with_capacity(arrays.len());
    for a in arrays {
        if by_name.contains_key(&a.name) {
            return Err(Error::Checkpoint {
                array: a.name,
                reason: "stored twice".into(),
            });
        }
        by_name.insert(a.name.clone(), a);
    }
    let mut model = Model::new(config, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let a = by_name.remove(name).ok_or_else(|| Error::Checkpoint {
            array: name.to_string(),
            reason: "missing".into(),
        })?;
        if a.shape != shape {
            return Err(Error::Checkpoint {
                array: name.to_string(),
                reason: format!("shape {:?}, model expects {:?}", a.shape, shape),
            });
        }
        if a.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint {
                array: name.to_string(),
                reason: "non-finite value".into(),
            });
        }
        Ok(a.data)
    };
    for p in model.params_mut() {
        let data = take(&p.name, p.value.shape())?;
        p.value = Tensor::new(p.value.shape().to_vec(), data)?;
    }
    for r in model.running_stats_mut() {
        let w = r.mean.len();
        r.mean = take(&format!("{}.running_mean", r.name), &[w])?;
        r.var = take(&format!("{}.running_var", r.name), &[w])?;
    }
    if let Some(extra) = by_name.into_keys().min() {
        return Err(Error::Checkpoint {
            array: extra,
            reason: "not part of the model".into(),
        });
    }
    model.set_mode(super::Mode::Eval);
    Ok(model)
}

/// Loads a model in eval mode.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::models::{Mode, Variant};

    fn trained_like(variant: Variant) -> Model {
        let mut m = Model::new(ModelConfig::reduced(variant), 3).unwrap();
        // make running stats non-trivial
        for (i, r) in m.running_stats_mut().iter_mut().enumerate() {
            r.mean.iter_mut().for_each(|v| *v = 0.01 * i as f64);
            r.var.iter_mut().for_each(|v| *v = 1.5);
        }
        m.set_mode(Mode::Eval);
        m
    }

    fn cloud() -> PointCloud {
        PointCloud::new(
            (0..64)
                .map(|i| [(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 / 64.0])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for v in Variant::ALL {
            let m = trained_like(v);
            save_checkpoint(&m, &path).unwrap();
            let l = load_checkpoint(&path).unwrap();
            assert_eq!(l.config(), m.config());
            assert_eq!(l.encode(&cloud()).unwrap(), m.encode(&cloud()).unwrap());
            assert_eq!(
                l.reconstruct(&cloud()).unwrap(),
                m.reconstruct(&cloud()).unwrap()
            );
        }
    }

    #[test]
    fn damaged_files_are_rejected_with_array_names() {
        let m = trained_like(Variant::SigmaVae);
        let bytes = to_bytes(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(
            matches!(from_bytes(&bad), Err(Error::Checkpoint { array, .. }) if array == "<header>")
        );

        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let truncated = &bytes[..bytes.len() - 3];
        match from_bytes(truncated) {
            Err(Error::Checkpoint { array, reason }) => {
                assert!(
                    array.ends_with("running_var") && reason.contains("truncated"),
                    "{array}"
                )
            }
            other => panic!("{other:?}"),
        }

        let mut other = ModelConfig::reduced(Variant::SigmaVae);
        other.latent_dim = 9;
        let wrong = Model::new(other, 1).unwrap();
        let (_, arrays) = parse(&to_bytes(&wrong).unwrap()).unwrap();
        let (config, _) = parse(&bytes).unwrap();
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&config).unwrap();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            buf.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(a.name.as_bytes());
            buf.push(DTYPE_F64);
            buf.push(a.shape.len() as u8);
            a.shape
                .iter()
                .for_each(|&d| buf.extend_from_slice(&(d as u64).to_le_bytes()));
            a.data
                .iter()
                .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        match from_bytes(&buf) {
            Err(Error::Checkpoint { array, reason }) => {
                assert_eq!(array, "encoder.mu.weight");
                assert!(reason.contains("shape"));
            }
            other => panic!("{other:?}"),
        }
    }
}
