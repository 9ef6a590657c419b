//! Shared helpers for the little-endian binary artifact formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    Ok(())
}

/// Checks magic and version. A short read is reported as a bad header.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    match r.read_exact(&mut got) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(Error::BadHeader),
        Err(e) => return Err(e.into()),
    }
    if &got != magic {
        return Err(Error::BadHeader);
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

pub(crate) fn eof_as_corrupt(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Corrupt("truncated artifact".into())
    } else {
        e.into()
    }
}

pub(crate) fn read_u32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u32>> {
    let mut out = vec![0u32; len];
    r.read_u32_into::<LittleEndian>(&mut out).map_err(eof_as_corrupt)?;
    Ok(out)
}

pub(crate) fn write_u32_slice<W: Write>(w: &mut W, xs: &[u32]) -> Result<()> {
    for &x in xs {
        w.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_u64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u64>> {
    let mut out = vec![0u64; len];
    r.read_u64_into::<LittleEndian>(&mut out).map_err(eof_as_corrupt)?;
    Ok(out)
}

pub(crate) fn write_u64_slice<W: Write>(w: &mut W, xs: &[u64]) -> Result<()> {
    for &x in xs {
        w.write_u64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(eof_as_corrupt)?;
    Ok(out)
}

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Fails if the reader has bytes left.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Corrupt("trailing bytes after artifact payload".into())),
    }
}
