//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "FGAN"
//! version      u16
//! latent_dim   u32
//! image_size   u32
//! channels     u32
//! entries      u32
//! entry*       name_len u16, name (UTF-8), rank u8, dims u32 × rank, f32 × Π dims
//! ```
//!
//! Generator entries are prefixed `gen.`, discriminator entries `disc.`.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gan::{Architecture, GanModel, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGAN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_model(model: &GanModel) -> Result<Vec<u8>> {
    let arch = model.arch();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [arch.latent_dim, arch.image_size, arch.channels] {
        out.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    let entries: Vec<_> = model.gen_params().iter().chain(model.disc_params().iter()).collect();
    out.extend_from_slice(&u32_of(entries.len())?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = e.tensor.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
        out.push(rank);
        for &d in shape {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit the checkpoint's u32 field")))
}

/// Write a checkpoint. The file is only created once the whole encoding succeeded.
pub fn save_model(path: &Path, model: &GanModel) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<GanModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Decode a checkpoint held in memory. Truncation surfaces as an I/O error
/// of kind `UnexpectedEof`; bad magic, version or layout as a format error.
pub fn decode_model(bytes: &[u8]) -> Result<GanModel> {
    let mut r = bytes;
    let eof = |e: io::Error| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let latent_dim = read_u32(&mut r)? as usize;
    let image_size = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)?;
    let mut gen = ParamSet::new();
    let mut disc = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let name = String::from_utf8(read_vec(&mut r, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = take::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_vec(
            &mut r,
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data)?;
        if name.starts_with("gen.") {
            gen.push(name, tensor);
        } else if name.starts_with("disc.") {
            disc.push(name, tensor);
        } else {
            return Err(Error::Format(format!("unexpected parameter `{name}`")));
        }
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameter table",
            r.len()
        )));
    }
    let width_of = |set: &ParamSet, name: &str, axis: usize| -> Result<usize> {
        set.get(name)
            .map(|t| t.shape()[axis] / 16)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
    };
    let arch = Architecture {
        latent_dim,
        image_size,
        channels,
        gen_width: width_of(&gen, "gen.proj.b", 0)?,
        disc_width: width_of(&disc, "disc.head.w", 0)?,
    };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    GanModel::from_parts(arch, gen, disc)
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    Ok(buf)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn read_vec(r: &mut &[u8], len: usize) -> Result<Vec<u8>> {
    if r.len() < len {
        return Err(Error::io(
            "<checkpoint>",
            io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint truncated"),
        ));
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    Ok(head.to_vec())
}
