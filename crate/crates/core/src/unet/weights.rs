//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAMSCOPE"                      8 bytes
//! version                         u16 (= 1)
//! depth                           u32
//! channels                        u32 x depth, deepest first
//! in_channels, num_classes        u32, u32
//! seed                            u64
//! parameter count                 u32
//! per parameter:
//!   name length, name             u32, UTF-8 bytes
//!   rank, extents                 u32, u32 x rank
//!   values                        f64 x product(extents)
//! ```

use std::path::Path;

use super::{UNetConfig, UNetModel, MAX_DEPTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAMSCOPE";
pub const VERSION: u16 = 1;

pub fn encode_weights(model: &UNetModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.depth as u32).to_le_bytes());
    for &c in &cfg.channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a weight file. The parameter records must match the shapes
/// implied by the embedded configuration.
pub fn decode_weights(bytes: &[u8]) -> Result<UNetModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let depth = r.u32()?;
    if !(2..=MAX_DEPTH).contains(&depth) {
        return Err(Error::config("depth", format!("must be in 2..={MAX_DEPTH}, got {depth}")));
    }
    let channels = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = UNetConfig {
        depth,
        channels,
        in_channels: r.u32()?,
        num_classes: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;

    let count = r.u32()?;
    let expected = config.param_shapes();
    let mut params = Vec::with_capacity(expected.len());
    for i in 0..count {
        let name_len = r.u32()?;
        let name_offset = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Parse {
                offset: name_offset + e.valid_up_to(),
                message: "parameter name is not UTF-8".to_string(),
            })?
            .to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > 4 {
            return Err(Error::Parse {
                offset: r.pos - 4,
                message: format!("parameter `{name}` has unsupported rank {rank}"),
            });
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        // Shapes are checked against the configuration before any payload is
        // allocated, so a hostile header cannot request huge buffers.
        match expected.get(i) {
            Some((n, s)) if *n == name && *s == shape => {}
            Some((n, s)) => {
                return Err(Error::WeightShape {
                    name: if *n == name { name } else { format!("{name} (expected `{n}`)") },
                    found: shape,
                    expected: s.clone(),
                })
            }
            None => {
                return Err(Error::WeightShape {
                    name,
                    found: shape,
                    expected: vec![],
                })
            }
        }
        let bytes_needed = shape
            .iter()
            .try_fold(8usize, |acc, &e| acc.checked_mul(e))
            .unwrap_or(usize::MAX);
        let raw = r.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    UNetModel::from_params(config, params)
}

pub fn save_weights(model: &UNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<UNetModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads a weight file that must fit `expected`; any parameter whose shape
/// differs is reported as a shape mismatch.
pub fn load_weights_as(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<UNetModel> {
    let model = load_weights(path)?;
    expected.validate()?;
    let loaded = model.params();
    for (i, (name, shape)) in expected.param_shapes().into_iter().enumerate() {
        match loaded.get(i) {
            Some((n, t)) if *n == name && t.shape() == shape.as_slice() => {}
            other => {
                return Err(Error::WeightShape {
                    name,
                    found: other.map(|(_, t)| t.shape().to_vec()).unwrap_or_default(),
                    expected: shape,
                })
            }
        }
    }
    if let Some((name, t)) = loaded.get(expected.param_shapes().len()) {
        return Err(Error::WeightShape {
            name: name.clone(),
            found: t.shape().to_vec(),
            expected: vec![],
        });
    }
    Ok(model)
}
