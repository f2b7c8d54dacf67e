//! Little-endian binary read/write helpers shared by the file formats.
//!
//! Every on-disk format in this crate (datasets, checkpoints, field
//! snapshots, observations) is little-endian f64/u32/u64 behind a 4-byte
//! magic; these helpers keep the encoding in one place.

use std::io::{self, Read, Write};

pub fn write_magic(w: &mut impl Write, magic: &[u8; 4]) -> io::Result<()> {
    w.write_all(magic)
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> io::Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad magic for {what}: expected {:?}, got {:?}", magic, buf),
        ));
    }
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    for &v in vs {
        write_f64(w, v)?;
    }
    Ok(())
}

pub fn read_f64_vec(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Version check shared by all formats.
pub fn expect_version(r: &mut impl Read, expected: u32, what: &str) -> io::Result<()> {
    let v = read_u32(r)?;
    if v != expected {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported {what} version {v} (expected {expected})"),
        ));
    }
    Ok(())
}
