//! Checkpoint container: magic "SDFZ", version, config block, named arrays
//! as little-endian f32, trailing CRC32. Optimizer state and the training
//! RNG position ride along so interrupted runs resume bit-exactly.

use std::path::Path;

use super::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, NdArray, ParamSet};

pub const SDFZ_MAGIC: &[u8; 4] = b"SDFZ";
pub const SDFZ_VERSION: u16 = 1;

/// Optimizer and RNG state needed to continue a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

// ----- byte helpers ---------------------------------------------------------

pub(crate) fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// name, ndim, dims, data (f32 LE).
pub(crate) fn put_array(buf: &mut Vec<u8>, name: &str, a: &NdArray) {
    put_u16(buf, name.len() as u16);
    buf.extend_from_slice(name.as_bytes());
    buf.push(a.shape().len() as u8);
    for &d in a.shape() {
        put_u32(buf, d as u32);
    }
    for &v in a.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_array(r: &mut Reader) -> Result<(String, NdArray)> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Format("array name is not utf-8".into()))?
        .to_string();
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = r.take(4 * n)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    NdArray::new(shape, data).map(|a| (name, a))
}

/// Verify and strip the trailing CRC32, returning the covered payload.
pub(crate) fn check_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format("file too short for checksum".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    Ok(payload)
}

// ----- encoding -------------------------------------------------------------

fn encode(model: &DenoiserParams, train: Option<&TrainState>) -> Vec<u8> {
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(SDFZ_MAGIC);
    put_u16(&mut buf, SDFZ_VERSION);
    put_u32(&mut buf, cfg.image_size as u32);
    put_u32(&mut buf, cfg.base_width as u32);
    put_u32(&mut buf, cfg.levels as u32);
    put_u32(&mut buf, cfg.time_embed_dim as u32);
    put_u64(&mut buf, cfg.seed);
    buf.push(u8::from(train.is_some()));
    match train {
        Some(t) => {
            put_u64(&mut buf, t.adam.step_count());
            put_u64(&mut buf, t.rng_seed);
            put_u64(&mut buf, (t.rng_word_pos & u128::from(u64::MAX)) as u64);
            put_u64(&mut buf, (t.rng_word_pos >> 64) as u64);
        }
        None => {
            for _ in 0..4 {
                put_u64(&mut buf, 0);
            }
        }
    }
    let n_opt = train.map_or(0, |_| 2 * model.params().len());
    put_u32(&mut buf, (model.params().len() + n_opt) as u32);
    for (name, value) in model.params().iter() {
        put_array(&mut buf, name, value);
    }
    if let Some(t) = train {
        for (name, m, v) in t.adam.moments() {
            put_array(&mut buf, &format!("opt.m.{name}"), m);
            put_array(&mut buf, &format!("opt.v.{name}"), v);
        }
    }
    buf
}

/// CRC32 of the weights-only encoding; stable identity for provenance checks.
pub(crate) fn params_checksum(model: &DenoiserParams) -> u32 {
    crc32fast::hash(&encode(model, None))
}

pub fn save_denoiser(model: &DenoiserParams, train: Option<&TrainState>, path: &Path) -> Result<()> {
    let mut buf = encode(model, train);
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserParams, Option<TrainState>)> {
    let bytes = std::fs::read(path)?;
    let payload = check_crc(&bytes)?;
    let mut r = Reader::new(payload);
    if r.take(4)? != SDFZ_MAGIC {
        return Err(Error::Format("bad magic, not a denoiser checkpoint".into()));
    }
    let version = r.u16()?;
    if version != SDFZ_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {SDFZ_VERSION}"
        )));
    }
    let cfg = DenoiserConfig {
        image_size: r.u32()? as usize,
        base_width: r.u32()? as usize,
        levels: r.u32()? as usize,
        time_embed_dim: r.u32()? as usize,
        seed: r.u64()?,
    };
    let has_opt = r.u8()? != 0;
    let opt_step = r.u64()?;
    let rng_seed = r.u64()?;
    let pos_lo = r.u64()?;
    let pos_hi = r.u64()?;
    let count = r.u32()? as usize;

    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        arrays.push(read_array(&mut r)?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after arrays".into()));
    }

    let mut params = ParamSet::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for (name, value) in arrays {
        if let Some(pname) = name.strip_prefix("opt.m.") {
            opt_m.push((pname.to_string(), value));
        } else if let Some(pname) = name.strip_prefix("opt.v.") {
            opt_v.push((pname.to_string(), value));
        } else {
            params.insert(&name, value)?;
        }
    }
    let model = DenoiserParams::from_parts(cfg, params)?;
    let train = if has_opt {
        let names: Vec<String> = model.params().names().map(str::to_string).collect();
        let pick = |pool: &[(String, NdArray)], what: &str| -> Result<Vec<NdArray>> {
            names
                .iter()
                .map(|n| {
                    pool.iter()
                        .find(|(pn, _)| pn == n)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| {
                            Error::Format(format!("missing optimizer {what} for {n:?}"))
                        })
                })
                .collect()
        };
        let m = pick(&opt_m, "first moment")?;
        let v = pick(&opt_v, "second moment")?;
        Some(TrainState {
            adam: AdamState::from_parts(names, m, v, opt_step),
            rng_seed,
            rng_word_pos: u128::from(pos_lo) | (u128::from(pos_hi) << 64),
        })
    } else {
        None
    };
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_model() -> DenoiserParams {
        DenoiserParams::init(DenoiserConfig {
            image_size: 16,
            base_width: 4,
            levels: 2,
            time_embed_dim: 8,
            seed: 77,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sdfz");
        let model = tiny_model();
        save_denoiser(&model, None, &path).unwrap();
        let (loaded, train) = load_denoiser(&path).unwrap();
        assert_eq!(loaded, model);
        assert!(train.is_none());
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sdfz");
        let model = tiny_model();
        let mut adam = AdamState::new(model.params());
        // Advance the state so moments are non-trivial.
        let grads = crate::tensor::GradMap::from_entries(
            model
                .params()
                .iter()
                .map(|(n, v)| (n.to_string(), NdArray::full(v.shape(), 0.01)))
                .collect(),
        );
        let mut m2 = model.clone();
        crate::tensor::adam_step(m2.params_mut(), &grads, &mut adam, 1e-3).unwrap();
        m2.params_mut().quantize_f32();
        adam.quantize_f32();
        let train = TrainState {
            adam: adam.clone(),
            rng_seed: 42,
            rng_word_pos: (7u128 << 64) | 9,
        };
        save_denoiser(&m2, Some(&train), &path).unwrap();
        let (loaded, t2) = load_denoiser(&path).unwrap();
        let t2 = t2.unwrap();
        assert_eq!(loaded, m2);
        assert_eq!(t2.adam, adam);
        assert_eq!(t2.rng_seed, 42);
        assert_eq!(t2.rng_word_pos, (7u128 << 64) | 9);
    }

    #[test]
    fn corrupted_magic_fails_checksum() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sdfz");
        save_denoiser(&tiny_model(), None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_denoiser(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sdfz");
        save_denoiser(&tiny_model(), None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_denoiser(&path).is_err());
    }

    #[test]
    fn cross_config_use_is_explicit_error() {
        let model = tiny_model();
        let mut other = *model.config();
        other.image_size = 32;
        assert!(matches!(
            model.ensure_config(&other),
            Err(Error::Config(_))
        ));
        assert!(model.ensure_config(model.config()).is_ok());
    }

    #[test]
    fn checksum_tracks_weights_not_optimizer() {
        let model = tiny_model();
        let c1 = params_checksum(&model);
        assert_eq!(c1, params_checksum(&model));
        let mut other = tiny_model();
        other.params_mut().quantize_f32();
        let mut changed = false;
        for (_, v) in other.params_mut().iter_mut() {
            if !v.is_empty() {
                v.data_mut()[0] += 0.5;
                changed = true;
                break;
            }
        }
        assert!(changed);
        assert_ne!(c1, params_checksum(&other));
    }
}
