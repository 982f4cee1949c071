//! NST tensor files: magic "NST1", u32 LE rank, rank u32 LE dims, then
//! row-major f32 LE values. Values are promoted to f64 on load and truncated
//! to f32 on save.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NST1";

/// Guards against absurd headers before any allocation happens.
const MAX_RANK: u32 = 8;

pub fn write_nst(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_nst(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"NST1\"", magic),
        });
    }

    let rank = read_u32_at(&mut r, &mut offset, "rank")?;
    if rank > MAX_RANK {
        return Err(Error::Format {
            offset: 4,
            message: format!("rank {rank} exceeds limit {MAX_RANK}"),
        });
    }

    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank {
        let dim_offset = offset;
        let d = read_u32_at(&mut r, &mut offset, "dimension")?;
        if d == 0 {
            return Err(Error::Format {
                offset: dim_offset,
                message: format!("dimension {i} is zero"),
            });
        }
        shape.push(d as usize);
    }

    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        read_exact_at(&mut r, &mut buf, &mut offset, "value")?;
        data.push(f32::from_le_bytes(buf) as f64);
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset,
            message: "trailing bytes after tensor payload".to_string(),
        });
    }

    Tensor::new(shape, data)
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Format {
                offset: *offset + filled as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        filled += n;
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32_at(r: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset, what)?;
    Ok(u32::from_le_bytes(buf))
}
