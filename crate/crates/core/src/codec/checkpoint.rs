//! Binary checkpoint format.
//!
//! ```text
//! "DLCK" | version u8 | precision tag | policy string
//! | latent_channels u32 | hidden_channels u32 | downsampling u32 | λ f64
//! | tensor count u32 | { name string | len u32 | values (tag precision) }*
//! ```
//! Strings carry a `u16` length prefix; all integers are little-endian.

use std::path::Path;

use super::{CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wire::{put_string, Reader};

const MAGIC: &[u8; 4] = b"DLCK";
const VERSION: u8 = 1;

/// Arithmetic contract under which decodes are reproducible across machines.
pub const PRECISION_POLICY: &str = "ieee754 round-to-nearest-even; no fused multiply-add; \
sequential accumulation in fixed index order; entropy tables from basic-operation exp";

fn tensors<T: Scalar>(model: &CodecModel<T>) -> Vec<(String, &[T])> {
    let mut out = Vec::new();
    for (prefix, layers) in [("analysis", &model.analysis), ("synthesis", &model.synthesis)] {
        for (i, l) in layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.as_slice()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.as_slice()));
        }
    }
    out.push(("prior.loc".into(), model.prior.loc.as_slice()));
    out.push(("prior.log_scale".into(), model.prior.log_scale.as_slice()));
    out
}

pub fn write_checkpoint<T: Scalar>(model: &CodecModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_string(&mut out, T::TAG);
    put_string(&mut out, PRECISION_POLICY);
    for v in [
        model.config.latent_channels,
        model.config.hidden_channels,
        model.config.downsampling,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.lambda.to_le_bytes());
    let ts = tensors(model);
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for (name, values) in ts {
        put_string(&mut out, &name);
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for &v in values {
            v.write_le(&mut out);
        }
    }
    out
}

/// Parses a checkpoint written with the same precision as `T`.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<CodecModel<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let tag = r.string("precision tag")?;
    if tag != T::TAG {
        return Err(Error::Incompatible(format!(
            "checkpoint stores {tag} parameters, loader expects {}",
            T::TAG
        )));
    }
    let policy = r.string("precision policy")?;
    if policy != PRECISION_POLICY {
        return Err(Error::Incompatible("checkpoint uses a different arithmetic policy".into()));
    }
    let config = CodecConfig {
        latent_channels: r.u32("latent channels")? as usize,
        hidden_channels: r.u32("hidden channels")? as usize,
        downsampling: r.u32("downsampling")? as usize,
    };
    let lambda = r.f64("lambda")?;
    let mut model = CodecModel::<T>::new(config, 0)?;
    model.lambda = lambda;
    let expected: Vec<(String, usize)> = tensors(&model).into_iter().map(|(n, v)| (n, v.len())).collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(r.corrupt(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut flat = Vec::with_capacity(model.flat_params().len());
    for (name, len) in &expected {
        let got = r.string("tensor name")?;
        if &got != name {
            return Err(r.corrupt(format!("tensor '{got}', expected '{name}'")));
        }
        let n = r.u32("tensor length")? as usize;
        if n != *len {
            return Err(r.corrupt(format!("tensor '{name}' has {n} values, expected {len}")));
        }
        for _ in 0..n {
            flat.push(r.scalar::<T>("tensor values")?);
        }
    }
    r.finish("checkpoint")?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    model.set_flat_params(&flat);
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &CodecModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<CodecModel<T>> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut m = CodecModel::<f32>::new(CodecConfig::default(), 5).unwrap();
        m.lambda = 0.03;
        m.prior.loc[3] = 0.25;
        let bytes = write_checkpoint(&m);
        let back = read_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back), bytes);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }

    #[test]
    fn precision_mismatch_is_incompatible() {
        let m = CodecModel::<f64>::new(CodecConfig::default(), 5).unwrap();
        let bytes = write_checkpoint(&m);
        assert!(matches!(read_checkpoint::<f32>(&bytes), Err(Error::Incompatible(_))));
        assert_ne!(m.fingerprint(), m.cast::<f32>().fingerprint());
    }

    #[test]
    fn corruption_is_detected() {
        let m = CodecModel::<f32>::new(CodecConfig::default(), 5).unwrap();
        let bytes = write_checkpoint(&m);
        assert!(matches!(read_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(read_checkpoint::<f32>(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let m = CodecModel::<f32>::new(CodecConfig::default(), 9).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap(), m);
    }
}
