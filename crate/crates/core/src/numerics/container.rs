//! Little-endian named-array container (`NAC1`).
//!
//! Layout: magic `NAC1`; u32 metadata length and that many bytes of UTF-8
//! `key = value` lines; u32 entry count; per entry u32 name length, name
//! bytes, u32 rank, rank × u32 dims, then the f64 data in row-major order.
//! Entries are written in name order, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Array, ParamVector};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"NAC1";

/// Arrays plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedArrays {
    pub meta: BTreeMap<String, String>,
    pub arrays: ParamVector,
}

fn put_u32<W: Write>(w: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("container", format!("{what} {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_named_arrays<W: Write>(mut w: W, c: &NamedArrays) -> Result<()> {
    let mut meta = String::new();
    for (k, v) in &c.meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidInput(format!("metadata entry `{k}` cannot be encoded")));
        }
        meta.push_str(&format!("{k} = {v}\n"));
    }
    w.write_all(CONTAINER_MAGIC)?;
    put_u32(&mut w, meta.len(), "metadata length")?;
    w.write_all(meta.as_bytes())?;
    put_u32(&mut w, c.arrays.len(), "entry count")?;
    for (name, a) in c.arrays.iter() {
        put_u32(&mut w, name.len(), "name length")?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, a.shape().len(), "rank")?;
        for &d in a.shape() {
            put_u32(&mut w, d, "dimension")?;
        }
        for v in a.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format("container", format!("truncated {what}")));
    }
    Ok(buf)
}

fn get_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let b = take(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn read_named_arrays<R: Read>(mut r: R) -> Result<NamedArrays> {
    if take(&mut r, 4, "magic")? != CONTAINER_MAGIC {
        return Err(Error::format("container", "bad magic"));
    }
    let meta_len = get_u32(&mut r, "metadata length")?;
    let meta_bytes = take(&mut r, meta_len, "metadata")?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|_| Error::format("container", "metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format("container", format!("bad metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = get_u32(&mut r, "entry count")?;
    let mut arrays = ParamVector::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r, "name length")?;
        let name = String::from_utf8(take(&mut r, name_len, "name")?)
            .map_err(|_| Error::format("container", "entry name is not UTF-8"))?;
        let rank = get_u32(&mut r, "rank")?;
        let shape = (0..rank)
            .map(|_| get_u32(&mut r, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("container", format!("entry `{name}` is too large")))?;
        let bytes = take(&mut r, len * 8, "array data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if arrays.get(&name).is_some() {
            return Err(Error::format("container", format!("duplicate entry `{name}`")));
        }
        arrays.insert(name, Array::new(shape, data)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("container", "trailing bytes"));
    }
    Ok(NamedArrays { meta, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = NamedArrays::default();
        c.meta.insert("kind".into(), "guide".into());
        c.meta.insert("note".into(), "a = b".into());
        c.arrays.insert(
            "w",
            Array::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 4.5, 1e300, 6.0]).unwrap(),
        );
        c.arrays.insert("b", Array::vector(vec![0.25]));
        c.arrays.insert("s", Array::scalar(-3.0));
        let mut buf = Vec::new();
        write_named_arrays(&mut buf, &c).unwrap();
        let back = read_named_arrays(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        write_named_arrays(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert!(read_named_arrays(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[3] = b'0';
        assert!(read_named_arrays(bad.as_slice()).is_err());
    }
}
