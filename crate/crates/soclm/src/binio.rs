//! Little-endian binary IO helpers shared by the on-disk formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_magic<W: Write>(w: &mut W, path: &Path, magic: &str) -> Result<()> {
    w.write_all(magic.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_magic<R: Read>(r: &mut R, path: &Path, magic: &str) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf != magic.as_bytes() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected magic {magic:?}"),
        });
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, path: &Path, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f32<W: Write>(w: &mut W, path: &Path, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_f32<R: Read>(r: &mut R, path: &Path) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f32::from_le_bytes(buf))
}

/// Length-prefixed UTF-8 string.
pub fn write_str<W: Write>(w: &mut W, path: &Path, s: &str) -> Result<()> {
    write_u32(w, path, s.len() as u32)?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_str<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "invalid UTF-8 in string table".into(),
    })
}

/// Write a row of f64 values as little-endian f32.
pub fn write_f32_row<W: Write>(w: &mut W, path: &Path, row: &[f64]) -> Result<()> {
    for &v in row {
        write_f32(w, path, v as f32)?;
    }
    Ok(())
}

pub fn read_f32_row<R: Read>(r: &mut R, path: &Path, dim: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(dim);
    for _ in 0..dim {
        row.push(read_f32(r, path)? as f64);
    }
    Ok(row)
}

pub fn write_f64<W: Write>(w: &mut W, path: &Path, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(buf))
}

/// Write a row of f64 values losslessly.
pub fn write_f64_row<W: Write>(w: &mut W, path: &Path, row: &[f64]) -> Result<()> {
    for &v in row {
        write_f64(w, path, v)?;
    }
    Ok(())
}

pub fn read_f64_row<R: Read>(r: &mut R, path: &Path, dim: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(dim);
    for _ in 0..dim {
        row.push(read_f64(r, path)?);
    }
    Ok(row)
}
