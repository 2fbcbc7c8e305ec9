//! Parameter checkpoint format.
//!
//! Little-endian binary: header `{magic "PENW", version u32, tensor count
//! u32}`, then per tensor `{name length u16, name bytes, rank u8, dims
//! u32 x rank, f32 data}`. Round-trips bit-exactly.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PenError, Result};

pub const MAGIC: &[u8; 4] = b"PENW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    let bad = |e: std::io::Error| PenError::Checkpoint(e.to_string());
    w.write_all(MAGIC).map_err(bad)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(bad)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(bad)?;
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(PenError::Checkpoint(format!("tensor name too long: {}", t.name)));
        }
        w.write_u16::<LittleEndian>(name.len() as u16).map_err(bad)?;
        w.write_all(name).map_err(bad)?;
        if t.shape.len() > u8::MAX as usize {
            return Err(PenError::Checkpoint("rank exceeds u8".into()));
        }
        w.write_u8(t.shape.len() as u8).map_err(bad)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32).map_err(bad)?;
        }
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(PenError::Checkpoint(format!(
                "tensor {}: shape {:?} does not match data length {}",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v).map_err(bad)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let bad = |e: std::io::Error| PenError::Checkpoint(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(PenError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != VERSION {
        return Err(PenError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(bad)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(bad)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name)
            .map_err(|e| PenError::Checkpoint(format!("bad tensor name: {e}")))?;
        let rank = r.read_u8().map_err(bad)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(bad)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>().map_err(bad)?);
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| PenError::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), tensors)
}

pub fn load_checkpoint_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let f = std::fs::File::open(path).map_err(|e| PenError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
