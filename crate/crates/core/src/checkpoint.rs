//! Binary tensor checkpoints.
//!
//! Layout: magic `SCAR`, version `u32`, tensor count `u32`, then for each
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` extents and
//! the values as little-endian `f32`. All integers are little-endian.
//! Values are narrowed to `f32` on write.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SCAR";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len: u16 = nb
            .len()
            .try_into()
            .map_err(|_| CheckpointError::NameTooLong(name.to_string()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r, "count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        read_exact(&mut r, &mut lb, "name length")?;
        let mut nb = vec![0u8; u16::from_le_bytes(lb) as usize];
        read_exact(&mut r, &mut nb, "name")?;
        let name = String::from_utf8(nb).map_err(|_| CheckpointError::Utf8)?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut vb = vec![0u8; 4 * n];
        read_exact(&mut r, &mut vb, "values")?;
        let data = vb
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor(name.clone(), e))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let list: Vec<(&str, &Tensor)> = store.iter().collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &list).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_store(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut store = ParamStore::new();
    for (name, t) in read_tensors(bytes)? {
        store.add(name, t);
    }
    Ok(store)
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_store(store))?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParamStore, CheckpointError> {
    decode_store(&std::fs::read(path)?)
}

/// Rounds every value through `f32`, so an in-memory store equals what a
/// checkpoint round trip would produce.
pub fn quantize_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab", &t)]).unwrap();
        let mut want = b"SCAR".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(2);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn round_trip_and_errors() {
        let mut s = ParamStore::new();
        s.add("idm.w", Tensor::matrix(2, 3, vec![0.5, 1.0, -3.0, 0.25, 0.0, 7.0]).unwrap());
        s.add("fdm.b", Tensor::scalar(0.125));
        let bytes = encode_store(&s);
        let back = decode_store(&bytes).unwrap();
        assert_eq!(back.checksum(""), s.checksum(""));

        assert!(matches!(decode_store(b"NOPE"), Err(CheckpointError::Truncated(_)) | Err(CheckpointError::Magic(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_store(&bad), Err(CheckpointError::Magic(_))));
        assert!(matches!(
            decode_store(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated("values"))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_store(&v2), Err(CheckpointError::Version(2))));
    }
}
