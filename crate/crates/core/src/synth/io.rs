//! Binary dataset files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "MCUDSET\0"
//! version      u32       1
//! config_len   u32       byte length of the config echo
//! config       UTF-8     generator config as `key = value` lines
//! num_samples  u64
//! seq_len      u32
//! raw_dim      u32
//! per sample:
//!   presence   u8        bitmask, a = 1, t = 2, v = 4
//!   label_tag  u8        0 = class index, 1 = real score
//!   label      8 bytes   u64 class index or f64 bits
//!   features   f64 x seq_len*raw_dim for each present modality, a/t/v order
//! ```
//!
//! Floats are stored as raw bits, so a save/load cycle is bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Label, SynthConfig, Utterance};
use crate::combo::ModalityCombination;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MCUDSET\0";
const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let cfg = ds.config.to_kv().to_text();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.config.seq_len as u32).to_le_bytes())?;
    w.write_all(&(ds.config.raw_dim as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for s in &ds.samples {
        buf.clear();
        buf.push(s.presence().bits());
        match s.label {
            Label::Class(c) => {
                buf.push(0);
                buf.extend_from_slice(&(c as u64).to_le_bytes());
            }
            Label::Score(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        for m in s.presence().modalities() {
            let f = s.features(m).expect("presence matches features");
            for v in f.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("dataset file", format!("truncated: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(Error::format("dataset file", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format("dataset file", format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)
        .map_err(|e| Error::format("dataset file", format!("truncated config: {e}")))?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::format("dataset file", "config echo is not UTF-8"))?;
    let config = SynthConfig::from_kv(&KvConfig::parse(&cfg_text)?)?;

    let n = read_u64(&mut r)? as usize;
    let seq_len = read_u32(&mut r)? as usize;
    let raw_dim = read_u32(&mut r)? as usize;
    if seq_len != config.seq_len || raw_dim != config.raw_dim {
        return Err(Error::format("dataset file", "header dims disagree with config echo"));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let [bits, tag] = read_array::<2, _>(&mut r)?;
        let presence = ModalityCombination::from_bits(bits)
            .map_err(|e| Error::format("dataset file", e.to_string()))?;
        let raw = read_u64(&mut r)?;
        let label = match tag {
            0 => Label::Class(raw as usize),
            1 => Label::Score(f64::from_bits(raw)),
            t => return Err(Error::format("dataset file", format!("unknown label tag {t}"))),
        };
        let mut features: [Option<Tensor>; 3] = Default::default();
        for m in presence.modalities() {
            let mut data = Vec::with_capacity(seq_len * raw_dim);
            for _ in 0..seq_len * raw_dim {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            features[m.index()] = Some(Tensor::matrix(seq_len, raw_dim, data));
        }
        samples.push(Utterance::new(features, label, presence)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format("dataset file", "trailing bytes"));
    }
    Ok(Dataset { config, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    crate::fsutil::write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    read_dataset(bytes.as_slice())
}
