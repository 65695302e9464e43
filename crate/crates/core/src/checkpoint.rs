//! `VTAC` checkpoint files: magic, format version, a config snapshot, the
//! named parameter table as little-endian f32, and (optionally) optimizer
//! moments plus the step counter. Round-trips are bit-exact; loading into a
//! different float width is rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::opt::{OptHyper, OptState};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VTAC";
const FORMAT_VERSION: u32 = 1;

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub dtype_bits: u32,
    pub params: Vec<(String, u32, u32, Vec<f32>)>,
    pub opt: Option<CheckpointOpt>,
}

pub struct CheckpointOpt {
    pub hyper: OptHyper,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 64 * 1024 * 1024 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serialize a parameter store (sorted by name) plus optional optimizer
/// state.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    opt: Option<&OptState<f32>>,
    step: u64,
    config_toml: &str,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    write_u32(&mut buf, FORMAT_VERSION)?;
    write_u32(&mut buf, Dtype::F32.bits())?;
    write_u64(&mut buf, step)?;
    write_string(&mut buf, config_toml)?;
    write_u32(&mut buf, store.len() as u32)?;
    for (name, t) in store.iter() {
        write_string(&mut buf, name)?;
        let (rows, cols) = t.shape();
        write_u32(&mut buf, rows as u32)?;
        write_u32(&mut buf, cols as u32)?;
        write_f32s(&mut buf, t.data())?;
    }
    match opt {
        Some(opt) => {
            buf.push(1);
            let hp = opt.hp;
            write_f64(&mut buf, hp.peak_lr)?;
            write_f64(&mut buf, hp.beta1)?;
            write_f64(&mut buf, hp.beta2)?;
            write_f64(&mut buf, hp.eps)?;
            write_f64(&mut buf, hp.weight_decay)?;
            write_u64(&mut buf, hp.warmup_steps)?;
            write_u64(&mut buf, hp.decay_period)?;
            write_f64(&mut buf, hp.decay_factor)?;
            let names: Vec<&String> = opt.moment_names().collect();
            write_u32(&mut buf, names.len() as u32)?;
            for name in names {
                let (m, v) = opt.moments(name).expect("moment names come from the state");
                write_string(&mut buf, name)?;
                write_u32(&mut buf, m.len() as u32)?;
                write_f32s(&mut buf, m)?;
                write_f32s(&mut buf, v)?;
            }
        }
        None => buf.push(0),
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a VTAC file)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let dtype_bits = read_u32(&mut r)?;
    if dtype_bits != 32 {
        return Err(Error::Checkpoint(format!("unsupported element width {dtype_bits}")));
    }
    let step = read_u64(&mut r)?;
    let config_toml = read_string(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_string(&mut r)?;
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let data = read_f32s(&mut r, rows as usize * cols as usize)?;
        params.push((name, rows, cols, data));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        let hyper = OptHyper {
            peak_lr: read_f64(&mut r)?,
            beta1: read_f64(&mut r)?,
            beta2: read_f64(&mut r)?,
            eps: read_f64(&mut r)?,
            weight_decay: read_f64(&mut r)?,
            warmup_steps: read_u64(&mut r)?,
            decay_period: read_u64(&mut r)?,
            decay_factor: read_f64(&mut r)?,
        };
        let count = read_u32(&mut r)? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let len = read_u32(&mut r)? as usize;
            let m = read_f32s(&mut r, len)?;
            let v = read_f32s(&mut r, len)?;
            moments.push((name, m, v));
        }
        Some(CheckpointOpt { hyper, moments })
    } else {
        None
    };
    Ok(Checkpoint { config_toml, step, dtype_bits, params, opt })
}

impl Checkpoint {
    /// Rebuild a parameter store in element type `R`; rejected unless the
    /// stored width matches `R` exactly (no silent coercion).
    pub fn restore_params<R: Scalar>(&self) -> Result<ParamStore<R>> {
        if R::DTYPE.bits() != self.dtype_bits {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {}-bit floats; refusing to load into a {}-bit store",
                self.dtype_bits,
                R::DTYPE.bits()
            )));
        }
        let mut store = ParamStore::new(0);
        for (name, rows, cols, data) in &self.params {
            let values: Vec<R> = data.iter().map(|&v| R::from_f64(v as f64)).collect();
            store.insert(name, Tensor::param(*rows as usize, *cols as usize, values)?)?;
        }
        Ok(store)
    }

    /// Rebuild optimizer state (moments + step) when it was stored.
    pub fn restore_opt(&self) -> Option<OptState<f32>> {
        self.opt.as_ref().map(|o| {
            let mut state = OptState::new(o.hyper);
            for (name, m, v) in &o.moments {
                state.set_moments(name, m.clone(), v.clone());
            }
            state.step = self.step;
            state
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new(7);
        store
            .insert("b.weight", Tensor::param(2, 3, vec![0.5, -1.25, 3.75, 0.1, -0.0625, 9.0]).unwrap())
            .unwrap();
        store.insert("a.bias", Tensor::param(1, 2, vec![0.25, -0.5]).unwrap()).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtac");
        let store = sample_store();
        let mut opt = OptState::new(OptHyper::default());
        opt.set_moments("a.bias", vec![0.1, 0.2], vec![0.3, 0.4]);
        opt.step = 42;
        save_checkpoint(&path, &store, Some(&opt), 42, "mode = \"tree\"").unwrap();
        let bytes_a = std::fs::read(&path).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, 42);
        assert_eq!(ckpt.config_toml, "mode = \"tree\"");
        let restored = ckpt.restore_params::<f32>().unwrap();
        for (name, t) in store.iter() {
            assert_eq!(restored.get(name).unwrap().data(), t.data());
        }
        let ropt = ckpt.restore_opt().unwrap();
        assert_eq!(ropt.step, 42);
        assert_eq!(ropt.moments("a.bias").unwrap().0, &[0.1f32, 0.2]);

        // saving the restored state reproduces identical bytes
        let path2 = dir.path().join("model2.vtac");
        save_checkpoint(&path2, &restored, Some(&ropt), 42, &ckpt.config_toml).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_other_float_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtac");
        save_checkpoint(&path, &sample_store(), None, 0, "").unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert!(matches!(ckpt.restore_params::<f64>(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtac");
        save_checkpoint(&path, &sample_store(), None, 0, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.vtac");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_moments_restore_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtac");
        save_checkpoint(&path, &sample_store(), None, 5, "x = 1").unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert!(ckpt.restore_opt().is_none());
        let _unused: BTreeMap<String, ()> = BTreeMap::new();
    }
}
