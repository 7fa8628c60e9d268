//! On-disk formats.
//!
//! Tensor container ("BDT1"): 4 magic bytes, a dtype tag byte (0 =
//! bit-packed, 1 = float64), a rank byte, `rank` u64 little-endian dims,
//! then the payload. Bit-packed payloads hold 8 row-major entries per byte
//! (least-significant bit first) padded to a byte boundary; float64 payloads
//! are raw little-endian doubles.
//!
//! Checkpoints ("BDC1") wrap a key=value metadata block and a sequence of
//! named BDT1 records. Images for human inspection go out as binary PGMs,
//! one file per channel. All writes are atomic (temp file + rename).

use crate::codec::LearnedArch;
use crate::denoiser::DenoiserArch;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{BitTensor, Dims, Image, ScalarMap};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CONTAINER_MAGIC: &[u8; 4] = b"BDT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDC1";

const DTYPE_BITS: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Payload of one container record.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    /// Unpacked bits, one byte per entry, each 0 or 1.
    Bits(Vec<u8>),
    F64(Vec<f64>),
}

/// Write to `path.tmp` then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_container(data: &TensorData, dims: &[u64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(Error::Format(format!("rank {} outside [1, 255]", dims.len())));
    }
    let count: u64 = dims.iter().product();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    match data {
        TensorData::Bits(bits) => {
            if bits.len() as u64 != count {
                return Err(Error::Format(format!(
                    "payload length {} does not match dims product {count}",
                    bits.len()
                )));
            }
            out.push(DTYPE_BITS);
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            let mut packed = vec![0u8; bits.len().div_ceil(8)];
            for (i, &b) in bits.iter().enumerate() {
                if b > 1 {
                    return Err(Error::Format(format!("entry {i} is {b}, not a bit")));
                }
                packed[i / 8] |= b << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        TensorData::F64(values) => {
            if values.len() as u64 != count {
                return Err(Error::Format(format!(
                    "payload length {} does not match dims product {count}",
                    values.len()
                )));
            }
            out.push(DTYPE_F64);
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decode one container record from the front of `bytes`, returning the
/// tensor and the number of bytes consumed.
pub fn decode_container(bytes: &[u8]) -> Result<(TensorData, Vec<u64>, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format("container truncated before header".into()));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Format("bad container magic".into()));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(Error::Format("container rank 0".into()));
    }
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("container truncated in dims".into()));
    }
    let dims: Vec<u64> = (0..rank)
        .map(|i| {
            let off = 6 + 8 * i;
            u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
        })
        .collect();
    let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        Error::Format("dims product overflows".into())
    })? as usize;
    match dtype {
        DTYPE_BITS => {
            let payload = count.div_ceil(8);
            if bytes.len() < header + payload {
                return Err(Error::Format("container truncated in bit payload".into()));
            }
            let packed = &bytes[header..header + payload];
            let bits: Vec<u8> = (0..count).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
            Ok((TensorData::Bits(bits), dims, header + payload))
        }
        DTYPE_F64 => {
            let payload = count * 8;
            if bytes.len() < header + payload {
                return Err(Error::Format("container truncated in f64 payload".into()));
            }
            let values: Vec<f64> = (0..count)
                .map(|i| {
                    let off = header + 8 * i;
                    f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
                })
                .collect();
            Ok((TensorData::F64(values), dims, header + payload))
        }
        other => Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
}

fn dims3(dims: &[u64]) -> Result<Dims> {
    if dims.len() != 3 {
        return Err(Error::Format(format!("expected rank 3, got {}", dims.len())));
    }
    Ok(Dims::new(dims[0] as usize, dims[1] as usize, dims[2] as usize))
}

pub fn write_bit_tensor(path: &Path, z: &BitTensor) -> Result<()> {
    let d = z.dims();
    let bytes = encode_container(
        &TensorData::Bits(z.data().to_vec()),
        &[d.c as u64, d.h as u64, d.w as u64],
    )?;
    atomic_write(path, &bytes)
}

pub fn read_bit_tensor(path: &Path) -> Result<BitTensor> {
    let bytes = fs::read(path)?;
    let (data, dims, _) = decode_container(&bytes)?;
    match data {
        TensorData::Bits(bits) => BitTensor::new(dims3(&dims)?, bits),
        TensorData::F64(_) => Err(Error::Format("expected a bit-packed tensor".into())),
    }
}

pub fn write_image(path: &Path, x: &Image) -> Result<()> {
    let d = x.dims();
    let bytes = encode_container(
        &TensorData::F64(x.data().to_vec()),
        &[d.c as u64, d.h as u64, d.w as u64],
    )?;
    atomic_write(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (data, dims, _) = decode_container(&bytes)?;
    match data {
        TensorData::F64(values) => Image::new(dims3(&dims)?, values),
        TensorData::Bits(_) => Err(Error::Format("expected a float64 tensor".into())),
    }
}

pub fn write_scalar_map(path: &Path, m: &ScalarMap) -> Result<()> {
    let bytes = encode_container(
        &TensorData::F64(m.data().to_vec()),
        &[m.height() as u64, m.width() as u64],
    )?;
    atomic_write(path, &bytes)
}

/// Binary PGM (P5, maxval 255) of one [0, 1] plane.
pub fn write_pgm(path: &Path, h: usize, w: usize, plane: &[f64]) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "pgm plane length {} does not match {h}x{w}",
            plane.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    atomic_write(path, &out)
}

/// One PGM per channel: `<stem>_c0.pgm`, `<stem>_c1.pgm`, ... (single
/// channel images drop the suffix).
pub fn write_image_pgms(dir: &Path, stem: &str, x: &Image) -> Result<()> {
    let Dims { c, h, w } = x.dims();
    for ci in 0..c {
        let name =
            if c == 1 { format!("{stem}.pgm") } else { format!("{stem}_c{ci}.pgm") };
        write_pgm(&dir.join(name), h, w, &x.data()[ci * h * w..(ci + 1) * h * w])?;
    }
    Ok(())
}

// --- checkpoints ---------------------------------------------------------

fn encode_meta(meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    text.into_bytes()
}

fn parse_meta(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata line '{line}'")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| {
        Error::Format(format!("checkpoint metadata missing key '{key}'"))
    })
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint metadata key '{key}' unparsable")))
}

fn encode_checkpoint(
    meta: &BTreeMap<String, String>,
    tensors: &[(&str, TensorData, Vec<u64>)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let meta_bytes = encode_meta(meta);
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (name, data, dims) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_container(data, dims)?);
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn decode_checkpoint(
    bytes: &[u8],
) -> Result<(BTreeMap<String, String>, BTreeMap<String, (TensorData, Vec<u64>)>)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + meta_len {
        return Err(Error::Format("checkpoint truncated in metadata".into()));
    }
    let meta = parse_meta(&bytes[12..12 + meta_len])?;
    let mut tensors = BTreeMap::new();
    let mut off = 12 + meta_len;
    while off < bytes.len() {
        if bytes.len() < off + 8 {
            return Err(Error::Format("checkpoint truncated in tensor name length".into()));
        }
        let name_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if bytes.len() < off + name_len {
            return Err(Error::Format("checkpoint truncated in tensor name".into()));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        off += name_len;
        let (data, dims, used) = decode_container(&bytes[off..])?;
        off += used;
        tensors.insert(name, (data, dims));
    }
    Ok((meta, tensors))
}

fn take_f64(
    tensors: &mut BTreeMap<String, (TensorData, Vec<u64>)>,
    name: &str,
) -> Result<Vec<f64>> {
    match tensors.remove(name) {
        Some((TensorData::F64(values), _)) => Ok(values),
        Some(_) => Err(Error::Format(format!("tensor '{name}' has the wrong dtype"))),
        None => Err(Error::Format(format!("checkpoint missing tensor '{name}'"))),
    }
}

/// Trained diffusion model: schedule, architecture, parameters, progress.
#[derive(Clone, Debug)]
pub struct DiffusionCheckpoint {
    pub schedule: NoiseSchedule,
    pub arch: DenoiserArch,
    pub params: Vec<f64>,
    pub iteration: u64,
    pub seed: u64,
}

pub fn save_diffusion_checkpoint(path: &Path, ck: &DiffusionCheckpoint) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "diffusion".into());
    meta.insert("schedule.kind".into(), ck.schedule.kind().to_string());
    let (b0, b1) = ck.schedule.beta_bounds();
    meta.insert("schedule.beta_start".into(), b0.to_string());
    meta.insert("schedule.beta_end".into(), b1.to_string());
    meta.insert("arch.in_channels".into(), ck.arch.in_channels.to_string());
    meta.insert("arch.hidden".into(), ck.arch.hidden.to_string());
    meta.insert("arch.blocks".into(), ck.arch.blocks.to_string());
    meta.insert("arch.kernel".into(), ck.arch.kernel.to_string());
    meta.insert("arch.time_dim".into(), ck.arch.time_dim.to_string());
    meta.insert("arch.recenter".into(), ck.arch.recenter.to_string());
    meta.insert("iteration".into(), ck.iteration.to_string());
    meta.insert("seed".into(), ck.seed.to_string());
    let betas = ck.schedule.betas().to_vec();
    let bytes = encode_checkpoint(
        &meta,
        &[
            ("schedule.beta", TensorData::F64(betas.clone()), vec![betas.len() as u64]),
            ("params", TensorData::F64(ck.params.clone()), vec![ck.params.len() as u64]),
        ],
    )?;
    atomic_write(path, &bytes)
}

pub fn load_diffusion_checkpoint(path: &Path) -> Result<DiffusionCheckpoint> {
    let bytes = fs::read(path)?;
    let (meta, mut tensors) = decode_checkpoint(&bytes)?;
    if meta_get(&meta, "kind")? != "diffusion" {
        return Err(Error::Format("not a diffusion checkpoint".into()));
    }
    let kind: ScheduleKind = meta_parse(&meta, "schedule.kind")?;
    let beta_start: f64 = meta_parse(&meta, "schedule.beta_start")?;
    let beta_end: f64 = meta_parse(&meta, "schedule.beta_end")?;
    let betas = take_f64(&mut tensors, "schedule.beta")?;
    let schedule = NoiseSchedule::from_betas(kind, beta_start, beta_end, betas);
    let arch = DenoiserArch {
        in_channels: meta_parse(&meta, "arch.in_channels")?,
        hidden: meta_parse(&meta, "arch.hidden")?,
        blocks: meta_parse(&meta, "arch.blocks")?,
        kernel: meta_parse(&meta, "arch.kernel")?,
        time_dim: meta_parse(&meta, "arch.time_dim")?,
        recenter: meta_parse(&meta, "arch.recenter")?,
    };
    Ok(DiffusionCheckpoint {
        schedule,
        arch,
        params: take_f64(&mut tensors, "params")?,
        iteration: meta_parse(&meta, "iteration")?,
        seed: meta_parse(&meta, "seed")?,
    })
}

/// Trained autoencoder codec.
#[derive(Clone, Debug)]
pub struct CodecCheckpoint {
    pub arch: LearnedArch,
    pub params: Vec<f64>,
    pub iteration: u64,
    pub seed: u64,
}

pub fn save_codec_checkpoint(path: &Path, ck: &CodecCheckpoint) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "codec".into());
    meta.insert("arch.image_channels".into(), ck.arch.image_channels.to_string());
    meta.insert("arch.latent_channels".into(), ck.arch.latent_channels.to_string());
    meta.insert("arch.downsample".into(), ck.arch.downsample.to_string());
    meta.insert("arch.hidden".into(), ck.arch.hidden.to_string());
    meta.insert("arch.kernel".into(), ck.arch.kernel.to_string());
    meta.insert("iteration".into(), ck.iteration.to_string());
    meta.insert("seed".into(), ck.seed.to_string());
    let bytes = encode_checkpoint(
        &meta,
        &[("params", TensorData::F64(ck.params.clone()), vec![ck.params.len() as u64])],
    )?;
    atomic_write(path, &bytes)
}

pub fn load_codec_checkpoint(path: &Path) -> Result<CodecCheckpoint> {
    let bytes = fs::read(path)?;
    let (meta, mut tensors) = decode_checkpoint(&bytes)?;
    if meta_get(&meta, "kind")? != "codec" {
        return Err(Error::Format("not a codec checkpoint".into()));
    }
    let arch = LearnedArch {
        image_channels: meta_parse(&meta, "arch.image_channels")?,
        latent_channels: meta_parse(&meta, "arch.latent_channels")?,
        downsample: meta_parse(&meta, "arch.downsample")?,
        hidden: meta_parse(&meta, "arch.hidden")?,
        kernel: meta_parse(&meta, "arch.kernel")?,
    };
    Ok(CodecCheckpoint {
        arch,
        params: take_f64(&mut tensors, "params")?,
        iteration: meta_parse(&meta, "iteration")?,
        seed: meta_parse(&meta, "seed")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::ProbTensor;

    #[test]
    fn container_bits_round_trip() {
        let mut rng = RngStream::new(81);
        let bits: Vec<u8> = (0..37).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let encoded = encode_container(&TensorData::Bits(bits.clone()), &[37]).unwrap();
        let (data, dims, used) = decode_container(&encoded).unwrap();
        assert_eq!(used, encoded.len());
        assert_eq!(dims, vec![37]);
        assert_eq!(data, TensorData::Bits(bits));
    }

    #[test]
    fn container_f64_round_trip_is_bit_exact() {
        let values = vec![0.1, -3.5, f64::MIN_POSITIVE, 1e300, 0.0];
        let encoded = encode_container(&TensorData::F64(values.clone()), &[5]).unwrap();
        let (data, _, _) = decode_container(&encoded).unwrap();
        match data {
            TensorData::F64(got) => {
                for (a, b) in got.iter().zip(&values) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(decode_container(b"XXXX").is_err());
        assert!(decode_container(b"BDT1\x07\x01AAAAAAAA").is_err());
        let ok = encode_container(&TensorData::F64(vec![1.0]), &[1]).unwrap();
        assert!(decode_container(&ok[..ok.len() - 1]).is_err());
    }

    #[test]
    fn bit_tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(82);
        let z = ProbTensor::constant(Dims::new(3, 5, 7), 0.5).unwrap().sample(&mut rng);
        let path = dir.path().join("z.bdt");
        write_bit_tensor(&path, &z).unwrap();
        assert_eq!(read_bit_tensor(&path).unwrap(), z);
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(83);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.next_f64()).collect();
        let img = Image::new(Dims::new(2, 4, 4), data).unwrap();
        let path = dir.path().join("x.bdt");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn pgm_has_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, 2, 3, &[0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn diffusion_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let schedule = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-3, 0.1).unwrap();
        let arch = DenoiserArch::default();
        let params: Vec<f64> = (0..arch.param_count()).map(|i| i as f64 * 0.001).collect();
        let ck = DiffusionCheckpoint {
            schedule: schedule.clone(),
            arch,
            params: params.clone(),
            iteration: 123,
            seed: 7,
        };
        let path = dir.path().join("model.ckpt");
        save_diffusion_checkpoint(&path, &ck).unwrap();
        let loaded = load_diffusion_checkpoint(&path).unwrap();
        assert_eq!(loaded.schedule, schedule);
        assert_eq!(loaded.arch, arch);
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.iteration, 123);
        assert_eq!(loaded.seed, 7);
    }

    #[test]
    fn codec_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 8,
            downsample: 4,
            hidden: 8,
            kernel: 3,
        };
        let params: Vec<f64> = (0..arch.param_count()).map(|i| (i as f64).sin()).collect();
        let ck = CodecCheckpoint { arch, params: params.clone(), iteration: 5, seed: 2 };
        let path = dir.path().join("codec.ckpt");
        save_codec_checkpoint(&path, &ck).unwrap();
        let loaded = load_codec_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, arch);
        assert_eq!(loaded.params, params);
    }

    #[test]
    fn checkpoint_kind_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 2,
            downsample: 1,
            hidden: 2,
            kernel: 3,
        };
        let ck = CodecCheckpoint {
            arch,
            params: vec![0.0; arch.param_count()],
            iteration: 0,
            seed: 0,
        };
        let path = dir.path().join("codec.ckpt");
        save_codec_checkpoint(&path, &ck).unwrap();
        assert!(load_diffusion_checkpoint(&path).is_err());
    }
}
