//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32  format version
//! u32  parameter count N
//! N x { u32 name length, name bytes (UTF-8), u32 rank, rank x u32 dim }
//! N x raw f32 values, in header order
//! ```
//!
//! The header order is the canonical parameter order, which is also the
//! concatenation order of flattened gradient vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut layout = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()?;
        if len > MAX_NAME_LEN {
            return Err(AutodiffError::Checkpoint(format!("name length {len}")));
        }
        let mut buf = vec![0u8; len as usize];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf)
            .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()?;
        if rank > MAX_RANK {
            return Err(AutodiffError::Checkpoint(format!("rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        layout.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        if params.get(&name).is_some() {
            return Err(AutodiffError::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(AutodiffError::Checkpoint("trailing bytes after data".into()));
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let f = File::create(path)?;
    write_params(BufWriter::new(f), params)
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let f = File::open(path)?;
    read_params(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_leads_with_version() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.5]));
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], &FORMAT_VERSION.to_le_bytes());
        assert_eq!(&buf[buf.len() - 4..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_unknown_version() {
        let buf = 99u32.to_le_bytes().to_vec();
        assert!(read_params(&buf[..]).is_err());
    }

    #[test]
    fn rejects_truncated_data() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        buf.pop();
        assert!(read_params(&buf[..]).is_err());
    }
}
