//! Binary tensor container (`LSTF`), checkpoints (`LSCK`) and PGM output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::geometry::PolarRaster;
use crate::tensor::{ParamStore, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"LSTF";
const TENSOR_VERSION: u8 = 1;
const CKPT_MAGIC: &[u8; 4] = b"LSCK";
const CKPT_VERSION: u8 = 1;
const ADAM_SEP: &str = "#adam.";

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        format_err!("truncated {what}")
    } else {
        Error::Io(e)
    }
}

/// Writes one `LSTF` record: magic, version, rank, u32 dims, f32 payload.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Argument("tensor rank above 255".into()))?;
    let mut buf = Vec::with_capacity(6 + 4 * t.shape().len() + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.push(rank);
    for d in t.shape() {
        let d = u32::try_from(*d).map_err(|_| Error::Argument("tensor extent above u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one `LSTF` record, leaving the reader just past its payload.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r, "tensor header")?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err!("bad tensor magic {magic:?}"));
    }
    let [version, rank] = read_array(r, "tensor header")?;
    if version != TENSOR_VERSION {
        return Err(format_err!("unsupported tensor version {version}"));
    }
    if rank == 0 {
        return Err(format_err!("tensor of rank 0"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_array(r, "tensor dims")?) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err!("tensor dims {shape:?} overflow"))?
        / 4;
    let mut bytes = Vec::new();
    r.take(numel as u64 * 4).read_to_end(&mut bytes)?;
    if bytes.len() != numel * 4 {
        return Err(format_err!("tensor {shape:?} payload truncated"));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map_err(|e| format_err!("{e}"))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a file holding exactly one `LSTF` record.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r).map_err(|e| match e {
        Error::Format(m) => format_err!("{}: {m}", path.display()),
        e => e,
    })?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err!("{}: trailing bytes after tensor", path.display()));
    }
    Ok(t)
}

/// Writes an `LSCK` checkpoint: the configuration text, every parameter,
/// and with `with_adam` each trainable parameter's moments and step count
/// stored as `name#adam.m`, `name#adam.v` and `name#adam.step`.
pub fn write_checkpoint<W: Write>(w: &mut W, config_text: &str, store: &ParamStore, with_adam: bool) -> Result<()> {
    let cfg = config_text.as_bytes();
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    w.write_all(&u32::try_from(cfg.len()).map_err(|_| Error::Argument("config too long".into()))?.to_le_bytes())?;
    w.write_all(cfg)?;

    let mut records: Vec<(String, Tensor)> = Vec::new();
    for (name, p) in store.iter() {
        records.push((name.to_owned(), p.value.clone()));
    }
    if with_adam {
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            let shape = p.value.shape();
            records.push((format!("{name}{ADAM_SEP}m"), Tensor::new(shape, p.adam.m.clone())?));
            records.push((format!("{name}{ADAM_SEP}v"), Tensor::new(shape, p.adam.v.clone())?));
            records.push((format!("{name}{ADAM_SEP}step"), Tensor::scalar(p.adam.step as f32)));
        }
    }
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in &records {
        let len = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Reads an `LSCK` checkpoint into its configuration text and parameters.
/// Every parameter comes back trainable; callers reapply the flags from the
/// configuration.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(String, ParamStore)> {
    let magic: [u8; 4] = read_array(r, "checkpoint header")?;
    if &magic != CKPT_MAGIC {
        return Err(format_err!("bad checkpoint magic {magic:?}"));
    }
    let [version] = read_array(r, "checkpoint header")?;
    if version != CKPT_VERSION {
        return Err(format_err!("unsupported checkpoint version {version}"));
    }
    let len = u32::from_le_bytes(read_array(r, "checkpoint config")?) as usize;
    let mut cfg = Vec::new();
    r.take(len as u64).read_to_end(&mut cfg)?;
    if cfg.len() != len {
        return Err(format_err!("truncated checkpoint config"));
    }
    let config = String::from_utf8(cfg).map_err(|_| format_err!("checkpoint config is not UTF-8"))?;

    let count = u32::from_le_bytes(read_array(r, "tensor count")?);
    let mut store = ParamStore::new();
    let mut adam = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(read_array(r, "tensor name")?) as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|e| truncated(e, "tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err!("tensor name is not UTF-8"))?;
        let t = read_tensor(r)?;
        match name.split_once(ADAM_SEP) {
            Some((base, field)) => adam.push((base.to_owned(), field.to_owned(), t)),
            None => store.insert(&name, t, true).map_err(|_| format_err!("duplicate tensor {name}"))?,
        }
    }
    for (base, field, t) in adam {
        let p = store
            .get_mut(&base)
            .ok_or_else(|| format_err!("optimizer state for unknown parameter {base}"))?;
        let fits = t.numel() == p.value.numel();
        match field.as_str() {
            "m" if fits => p.adam.m = t.into_data(),
            "v" if fits => p.adam.v = t.into_data(),
            "step" if t.numel() == 1 && t.data()[0] >= 0.0 => p.adam.step = t.data()[0] as u64,
            _ => return Err(format_err!("bad optimizer tensor {base}{ADAM_SEP}{field}")),
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err!("trailing bytes after checkpoint"));
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config_text: &str, store: &ParamStore, with_adam: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config_text, store, with_adam)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Min-max scales the raster into 8-bit gray levels, highest elevation row
/// first. An all-zero raster is black; any other constant raster is
/// mid-gray.
pub fn raster_to_gray(raster: &PolarRaster) -> Vec<u8> {
    gray_levels(raster.data(), raster.n_cols())
}

/// [`raster_to_gray`] for a row-major `cols`-wide image.
pub fn gray_levels(data: &[f32], cols: usize) -> Vec<u8> {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols.max(1)).rev() {
        out.extend(row.iter().map(|v| {
            if hi <= 0.0 && lo >= 0.0 {
                0
            } else if hi == lo {
                128
            } else {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            }
        }));
    }
    out
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Argument(format!("{} pixels for a {width}x{height} image", gray.len())));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    Ok(())
}
