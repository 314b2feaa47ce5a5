//! Binary checkpoint format.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "LPWR"  magic
//! u16     format version (1)
//! u32     config length, then that many bytes of canonical run config
//! f64     intensity mean, f64 intensity std (the training normalization)
//! u32     tensor count
//! tensor: u16 name length, name bytes,
//!         u8 dtype (1 = f32, 2 = f64), u8 flags (bit 0: weight decay),
//!         u8 rank, u32 dims...,
//!         raw values
//! u32     CRC-32 of everything above
//! ```
//!
//! The checksum is verified before any parsing, so a corrupted or truncated
//! file fails fast with a checksum error rather than a confusing parse
//! error. Values convert through `f64` on load, which is exact whenever the
//! stored and requested dtypes match.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{BnBuffer, Param, ParamSet};
use crate::runconfig::RunConfig;
use crate::tensor::{Dtype, Element};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LPWR";
const VERSION: u16 = 1;

const fn crc_table() -> [u32; 256] {
    let mut t = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        t[i] = c;
        i += 1;
    }
    t
}

static CRC_TABLE: [u32; 256] = crc_table();

fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// The checksum used by the file format, exposed for tooling and tests.
pub fn crc32_of(data: &[u8]) -> u32 {
    crc32(data)
}

struct TensorRecord {
    name: String,
    dims: Vec<usize>,
    /// Values widened to f64; exact for both stored dtypes.
    values: Vec<f64>,
}

fn push_tensor<T: Element>(out: &mut Vec<u8>, name: &str, decay: bool, dims: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(u8::from(decay));
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match T::DTYPE {
        Dtype::F32 => {
            for v in data {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in data {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
}

/// Writes `set` with its run configuration and the intensity normalization
/// it was trained under. The set must match the model the configuration
/// describes.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    config: &RunConfig,
    set: &ParamSet<T>,
    norm: NormStats,
) -> Result<()> {
    validate_against_spec(config, set)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config.canonical_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&norm.mu.to_le_bytes());
    out.extend_from_slice(&norm.sigma.to_le_bytes());

    let count = set.params.len() + 2 * set.buffers.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in &set.params {
        push_tensor(&mut out, &p.name, p.decay, &p.shape, &p.data);
    }
    for b in &set.buffers {
        let c = [b.mean.len()];
        push_tensor(&mut out, &format!("{}.running_mean", b.name), false, &c, &b.mean);
        push_tensor(&mut out, &format!("{}.running_var", b.name), false, &c, &b.var);
    }

    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file ends mid-record".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_tensor(r: &mut Reader) -> Result<TensorRecord> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
        .to_string();
    let dtype = Dtype::from_tag(r.u8()?)
        .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag")))?;
    let _flags = r.u8()?;
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let numel: usize = dims.iter().product();
    let values = match dtype {
        Dtype::F32 => r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(TensorRecord { name, dims, values })
}

/// Reads a checkpoint back as `(config, parameters, normalization)` in the
/// requested element type.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(RunConfig, ParamSet<T>, NormStats)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 2 + 4 + 4 + 4 {
        return Err(Error::Checkpoint(format!(
            "{}: too short to be a checkpoint",
            path.display()
        )));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let (payload, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32(payload);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored:08x}, computed {actual:08x}), file is corrupted",
            path.display()
        )));
    }

    let mut r = Reader { buf: payload, at: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = RunConfig::parse_text(cfg_text)?;
    let norm = NormStats { mu: r.f64()?, sigma: r.f64()? };
    if !norm.mu.is_finite() || !(norm.sigma > 0.0) || !norm.sigma.is_finite() {
        return Err(Error::Checkpoint(format!(
            "invalid normalization stats (mu {}, sigma {})",
            norm.mu, norm.sigma
        )));
    }

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    if r.at != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }

    let set = assemble(&config, tensors)?;
    Ok((config, set, norm))
}

fn assemble<T: Element>(config: &RunConfig, tensors: Vec<TensorRecord>) -> Result<ParamSet<T>> {
    let spec = config.model_spec()?;
    let plan = spec.param_specs();
    let buf_plan = spec.buffer_plan();
    if tensors.len() != plan.len() + 2 * buf_plan.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this model, found {}",
            plan.len() + 2 * buf_plan.len(),
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut expect = |name: &str, shape: &[usize]| -> Result<TensorRecord> {
        let t = it.next().expect("count checked above");
        if t.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {name}, found {}",
                t.name
            )));
        }
        if t.dims != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?} does not match model shape {shape:?}",
                t.dims
            )));
        }
        Ok(t)
    };

    let mut params = Vec::with_capacity(plan.len());
    for spec in &plan {
        let t = expect(&spec.name, &spec.shape)?;
        params.push(Param {
            name: t.name,
            shape: t.dims,
            data: t.values.iter().map(|&v| T::from_f64(v)).collect(),
            decay: spec.decay,
            lr_scale: spec.lr_scale,
        });
    }
    let mut buffers = Vec::with_capacity(buf_plan.len());
    for (name, c) in &buf_plan {
        let mean = expect(&format!("{name}.running_mean"), &[*c])?;
        let var = expect(&format!("{name}.running_var"), &[*c])?;
        buffers.push(BnBuffer {
            name: name.clone(),
            mean: mean.values.iter().map(|&v| T::from_f64(v)).collect(),
            var: var.values.iter().map(|&v| T::from_f64(v)).collect(),
        });
    }
    Ok(ParamSet { params, buffers })
}

fn validate_against_spec<T: Element>(config: &RunConfig, set: &ParamSet<T>) -> Result<()> {
    let spec = config.model_spec()?;
    let plan = spec.param_specs();
    if plan.len() != set.params.len() || spec.buffer_plan().len() != set.buffers.len() {
        return Err(Error::Checkpoint(
            "parameter set does not match the configured model".into(),
        ));
    }
    for (s, p) in plan.iter().zip(&set.params) {
        if s.name != p.name || s.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} (shape {:?}) does not match the configured model's {} {:?}",
                p.name, p.shape, s.name, s.shape
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_matches_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn save_rejects_mismatched_model() {
        let mut cfg = RunConfig::default();
        cfg.apply_args(&["model.preset=mini", "model.in_h=64", "model.in_w=64"]).unwrap();
        let other = {
            let mut c = cfg.clone();
            c.apply("model.head", "embedding").unwrap();
            c
        };
        let set: ParamSet<f32> = other.model_spec().unwrap().init_params(1);
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(&dir.path().join("x.ckpt"), &cfg, &set, NormStats::IDENTITY);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn nonsense_files_are_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"PKZZ").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
        std::fs::write(&path, b"LPWR this is not really a checkpoint either").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }
}
