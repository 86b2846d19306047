//! Binary tensor records: `name_len: u64`, name bytes, `rank: u64`,
//! `dims: [u64; rank]`, then `f64` data. All integers and floats are
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Refuse absurd lengths from corrupt files before allocating.
const MAX_NAME: u64 = 1 << 16;
const MAX_ELEMS: u64 = 1 << 32;

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

pub fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, what)?))
}

pub fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, t.rank() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let len = read_u64(r, "record name length")?;
    if len > MAX_NAME {
        return Err(Error::Format(format!("record name length {len}")));
    }
    let mut name = vec![0u8; len as usize];
    read_exact(r, &mut name, "record name")?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
    let rank = read_u64(r, "record rank")?;
    if rank > 8 {
        return Err(Error::Format(format!("record `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r, "record dims")?;
        n = n.saturating_mul(d);
        shape.push(d as usize);
    }
    if n > MAX_ELEMS {
        return Err(Error::Format(format!("record `{name}` claims {n} elements")));
    }
    let mut raw = vec![0u8; n as usize * 8];
    read_exact(r, &mut raw, &format!("data of `{name}`"))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
    Ok((name, t))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A count-prefixed list of records.
pub fn write_records<W: Write>(w: &mut W, records: &[(String, &Tensor)]) -> std::io::Result<()> {
    write_u64(w, records.len() as u64)?;
    for (name, t) in records {
        write_record(w, name, t)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = read_u64(r, "record count")?;
    if n > MAX_ELEMS {
        return Err(Error::Format(format!("record count {n}")));
    }
    (0..n).map(|_| read_record(r)).collect()
}
