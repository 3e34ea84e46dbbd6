//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `b"HFUSECKP"`, u32 version, u8 mode, u8 skip flag, u16 zero,
//! u32 base width, 4 × u32 block counts, u8 SAR-normalization flag,
//! f64 SAR mean, f64 SAR std, u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, rank × u64 extents and the raw
//! f64 samples.

use std::fs;
use std::path::Path;

use super::{ArchScale, FusionMode, FusionVariant, ModelError, ModelGraph, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"HFUSECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &ModelGraph) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + model.num_params() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.push(model.variant.mode.code());
    b.push(model.variant.skip_connections as u8);
    b.extend_from_slice(&[0, 0]);
    b.extend_from_slice(&(model.arch.base_width as u32).to_le_bytes());
    for n in model.arch.blocks {
        b.extend_from_slice(&(n as u32).to_le_bytes());
    }
    let (mean, std) = model.sar_norm.unwrap_or((0.0, 0.0));
    b.push(model.sar_norm.is_some() as u8);
    b.extend_from_slice(&mean.to_le_bytes());
    b.extend_from_slice(&std.to_le_bytes());
    b.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("unexpected end of file at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<ModelGraph> {
    let corrupt = |detail: String| ModelError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(corrupt)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body = || -> std::result::Result<(FusionVariant, ArchScale, ParamStore, Option<(f64, f64)>), String> {
        let mut r = Reader { buf, pos: 12 };
        let code = r.u8()?;
        let mode = FusionMode::from_code(code).ok_or(format!("unknown mode code {code}"))?;
        let skip = match r.u8()? {
            0 => false,
            1 => true,
            x => return Err(format!("bad skip flag {x}")),
        };
        r.take(2)?;
        let base_width = r.u32()? as usize;
        let mut blocks = [0usize; 4];
        for b in &mut blocks {
            *b = r.u32()? as usize;
        }
        let has_norm = r.u8()?;
        let (mean, std) = (r.f64()?, r.f64()?);
        let sar_norm = match has_norm {
            0 => None,
            1 => Some((mean, std)),
            x => return Err(format!("bad normalization flag {x}")),
        };
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "parameter name is not UTF-8".to_string())?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(format!("{name}: rank {rank} out of range"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or(format!("{name}: extents overflow"))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.insert(name, t).map_err(|e| e.to_string())?;
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok((FusionVariant::new(mode, skip), ArchScale { base_width, blocks }, params, sar_norm))
    };
    let (variant, arch, params, sar_norm) = body().map_err(corrupt)?;
    let mut m = ModelGraph::from_params(variant, arch, params).map_err(|e| corrupt(e.to_string()))?;
    if let Some((mean, std)) = sar_norm {
        m.set_sar_normalization(mean, std).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(m)
}

/// Writes `model` atomically (temporary file, then rename).
pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode(model)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::super::build_model;
    use super::*;

    fn model() -> ModelGraph {
        let mut m = build_model(FusionVariant::new(FusionMode::Early, true), ArchScale::desk(), 5).unwrap();
        m.set_sar_normalization(0.1, 0.07).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let back = decode(&encode(&m), Path::new("m.ckpt")).unwrap();
        assert_eq!(back.variant(), m.variant());
        assert_eq!(back.sar_normalization(), Some((0.1, 0.07)));
        for ((a, s), (b, t)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a, b);
            assert!(s.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_is_corrupt() {
        let buf = encode(&model());
        for cut in [4, 20, 60, buf.len() - 1] {
            assert!(
                matches!(decode(&buf[..cut], Path::new("m")), Err(ModelError::Corrupt { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn future_version_rejected() {
        let mut buf = encode(&model());
        buf[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode(&buf, Path::new("m")),
            Err(ModelError::Version { found: 2, expected: 1, .. })
        ));
    }
}
