//! Binary model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DSQZ"                      magic
//! u32 format_version
//! u32 n, n bytes              JSON NetworkConfig
//! u32 record count
//! per record:
//!   u32 n, n bytes            name ("conv1.weight", "fire2.squeeze1x1.bias", ...)
//!   u32 rank, rank × u32      shape
//!   prod(shape) × f32         values
//! u32 CRC32 of everything above
//! ```
//!
//! Optimizer state is not stored.

use std::fs;
use std::path::Path;

use super::{build_network, Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DSQZ";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serialize to the byte layout documented above.
pub fn encode_model<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, model.format_version);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let table = model.named_params();
    put_u32(&mut out, 2 * table.len() as u32);
    for (name, p) in table {
        put_tensor(&mut out, &format!("{name}.weight"), &p.weights);
        put_tensor(&mut out, &format!("{name}.bias"), &p.bias);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::ModelFormat("unexpected end of model data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a model file. Checks run in order: magic, version, checksum,
/// then structure against the embedded config.
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::ModelFormat("missing DSQZ magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum);
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let cfg_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut model: Model<T> = build_network(&config, 0)?;
    model.format_version = version;

    let expected = model.config.param_layout();
    let count = r.u32()? as usize;
    if count != 2 * expected.len() {
        return Err(Error::ModelFormat(format!(
            "{count} records, config needs {}",
            2 * expected.len()
        )));
    }
    for ((name, _, _), p) in expected.iter().zip(model.params_mut()) {
        for (suffix, t) in [("weight", &mut p.weights), ("bias", &mut p.bias)] {
            let want = format!("{name}.{suffix}");
            let n = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::ModelFormat("record name is not UTF-8".into()))?;
            if got != want {
                return Err(Error::ModelFormat(format!("expected record {want}, found {got}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(Error::ModelFormat(format!(
                    "{want} has shape {shape:?}, config implies {:?}",
                    t.shape()
                )));
            }
            let raw = r.take(4 * t.len())?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::from_f64_lossy(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::ModelFormat("trailing bytes after parameter records".into()));
    }
    Ok(model)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;

    fn model() -> Model<f32> {
        build_network(&NetworkConfig::micro(1, 32, Head::Regression), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_model(&m).unwrap();
        let back: Model<f32> = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
        let x = Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 17) as f32 - 8.0);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = encode_model(&model()).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(decode_model::<f32>(cut), Err(Error::Checksum)));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode_model(&model()).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::UnsupportedVersion(99))));
    }

    #[test]
    fn shape_inconsistency_detected() {
        // Re-sign a file whose config claims a different input width.
        let m = model();
        let mut bytes = encode_model(&m).unwrap();
        bytes.truncate(bytes.len() - 4);
        let cfg = serde_json::to_vec(&m.config).unwrap();
        let patched = String::from_utf8(cfg.clone())
            .unwrap()
            .replace("\"input_channels\":1", "\"input_channels\":3");
        assert_eq!(patched.len(), cfg.len());
        bytes[12..12 + cfg.len()].copy_from_slice(patched.as_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::ModelFormat(_))));
    }
}
