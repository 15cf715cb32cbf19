//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"VSEG"
//! version    u16                   (currently 1)
//! digest     u64                   structural digest of NetConfig
//! width_div  u32 | cardinality u32 | batchnorm u8    (NetConfig fields)
//! method     u32 length + utf-8 bytes
//! iteration  u64
//! ema_alpha  f64
//! count      u32                   parameter records
//! record*    name (u32 + utf-8), ndim u32, dims u32*, f32 data
//! ```
//!
//! Parameters round-trip bit-exactly; a digest or layout mismatch against
//! the rebuilt architecture rejects the file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build_model, NetConfig, SegModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSEG";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    pub iteration: u64,
    pub ema_alpha: f64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            method: "untrained".into(),
            iteration: 0,
            ema_alpha: 0.0,
        }
    }
}

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn save_checkpoint(path: &Path, model: &SegModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp-ckpt-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&tmp, e);

        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&model.config.digest().to_le_bytes()).map_err(io)?;
        w_u32(&mut w, model.config.width_divisor as u32).map_err(io)?;
        w_u32(&mut w, model.config.cardinality as u32).map_err(io)?;
        w.write_all(&[model.config.batchnorm as u8]).map_err(io)?;
        w_str(&mut w, &meta.method).map_err(io)?;
        w.write_all(&meta.iteration.to_le_bytes()).map_err(io)?;
        w.write_all(&meta.ema_alpha.to_le_bytes()).map_err(io)?;

        w_u32(&mut w, model.params.len() as u32).map_err(io)?;
        for (_, entry) in model.params.iter() {
            w_str(&mut w, &entry.name).map_err(io)?;
            w_u32(&mut w, entry.value.shape().len() as u32).map_err(io)?;
            for &d in entry.value.shape() {
                w_u32(&mut w, d as u32).map_err(io)?;
            }
            for &v in entry.value.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated string".into()))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(SegModel<f32>, CheckpointMeta)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(f),
    };

    let magic: [u8; 4] = r.bytes()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let digest = r.u64()?;
    let config = NetConfig {
        width_divisor: r.u32()? as usize,
        cardinality: r.u32()? as usize,
        batchnorm: r.bytes::<1>()?[0] != 0,
    };
    if config.digest() != digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: file says {digest:#x}, config derives {:#x}",
            config.digest()
        )));
    }
    let meta = CheckpointMeta {
        method: r.string()?,
        iteration: r.u64()?,
        ema_alpha: r.f64()?,
    };

    // Rebuild the architecture, then overwrite every tensor from the file.
    let mut model = build_model::<f32>(0, config)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            model.params.len()
        )));
    }
    for i in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let id = crate::tensor::ParamId(i);
        let entry = model.params.entry(id);
        if entry.name != name || entry.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "record {i} is {name} {shape:?}, architecture expects {} {:?}",
                entry.name,
                entry.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        for v in data.iter_mut() {
            *v = f32::from_le_bytes(r.bytes()?);
        }
        *model.params.get_mut(id) = Tensor::new(shape, data)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward_infer;

    fn test_model() -> SegModel<f32> {
        build_model(
            11,
            NetConfig {
                width_divisor: 4,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_forward_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = test_model();
        let meta = CheckpointMeta {
            method: "supervised".into(),
            iteration: 123,
            ema_alpha: 0.99,
        };
        save_checkpoint(&path, &model, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2, meta);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }

        let input = Tensor::from_fn(vec![1, 1, 64, 64], |i| (i % 113) as f32 / 113.0);
        let before = forward_infer(&model, &input).unwrap();
        let after = forward_infer(&back, &input).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &test_model(), &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &test_model(), &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] ^= 0x5A;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("digest"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &test_model(), &CheckpointMeta::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
