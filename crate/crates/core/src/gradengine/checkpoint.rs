use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"KOOPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint blob truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamRecord>,
    model_config: serde_json::Value,
}

/// A checkpoint read back from disk: the model-config JSON block and the
/// parameter tensors in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub model_config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

/// Layout: 8-byte magic, u32 LE version, u64 LE header length, JSON header
/// (names, shapes, model config), then every parameter as little-endian f64
/// in header order.
pub fn write_checkpoint(
    path: &Path,
    model_config: &serde_json::Value,
    params: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    let header = Header {
        params: params
            .iter()
            .map(|(name, t)| ParamRecord { name: name.clone(), shape: t.shape.clone() })
            .collect(),
        model_config: model_config.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in params {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() < total * 8 {
        return Err(CheckpointError::Truncated { expected: total, found: blob.len() / 8 });
    }

    let mut params = Vec::with_capacity(header.params.len());
    let mut offset = 0usize;
    for rec in header.params {
        let n: usize = rec.shape.iter().product();
        let mut t = Tensor::zeros(&rec.shape);
        for i in 0..n {
            let bytes: [u8; 8] = blob[offset + i * 8..offset + (i + 1) * 8].try_into().unwrap();
            t.data[i] = f64::from_le_bytes(bytes);
        }
        offset += n * 8;
        params.push((rec.name, t));
    }
    Ok(Checkpoint { model_config: header.model_config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_exact_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::matrix(2, 3, vec![1.0, -2.5, 3e-17, f64::MIN_POSITIVE, 0.0, 7.25]);
        let b = Tensor::vector(vec![0.1 + 0.2]);
        let cfg = serde_json::json!({"state_dim": 2, "latent_dim": 3});
        write_checkpoint(&path, &cfg, &[("enc.w".into(), &a), ("k".into(), &b)]).unwrap();

        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.model_config["latent_dim"], 3);
        assert_eq!(ck.params.len(), 2);
        assert_eq!(ck.params[0].0, "enc.w");
        assert_eq!(ck.params[0].1.shape, vec![2, 3]);
        for (x, y) in ck.params[0].1.data.iter().zip(&a.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(ck.params[1].1.data[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt.bin");
        std::fs::write(&path, b"PNG....whatever").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        write_checkpoint(&path, &serde_json::json!({}), &[("w".into(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 8]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::Truncated { .. })));
    }
}
