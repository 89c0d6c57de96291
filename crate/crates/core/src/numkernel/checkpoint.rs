//! Flat binary checkpoint.
//!
//! Layout: `b"DEMOCKPT"`, `u32` version, then one record per parameter
//! until end of file: `u32` name length, name bytes (UTF-8), `u32` rank,
//! `rank × u64` dims, `product(dims) × f64` data. All integers and floats
//! are little-endian.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::KernelError;

pub const MAGIC: &[u8; 8] = b"DEMOCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, out: &mut impl Write) -> Result<(), KernelError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (_, name, value) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn bad(msg: impl Into<String>) -> KernelError {
    KernelError::CheckpointFormat(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], KernelError> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, KernelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, KernelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore, KernelError> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, Tensor::new(dims, data)?)?;
    }
    Ok(store)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ParamStore, KernelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(&[1.5])).unwrap();
        let b = to_bytes(&s);
        assert_eq!(&b[..8], b"DEMOCKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'a');
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(b.len(), 21 + 16 + 8);
        assert_eq!(&b[37..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(2, 2)).unwrap();
        let b = to_bytes(&s);
        assert!(from_bytes(&b[..b.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_names_shapes_and_bits(
            params in proptest::collection::vec(
                (1usize..4, 1usize..5, proptest::collection::vec(-1e6f64..1e6, 20)),
                1..5,
            )
        ) {
            let mut s = ParamStore::new();
            for (i, (r, c, vals)) in params.iter().enumerate() {
                let data = vals[..r * c].to_vec();
                s.insert(&format!("p{i}.w"), Tensor::matrix(*r, *c, data)).unwrap();
            }
            let back = from_bytes(&to_bytes(&s)).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for ((_, n1, t1), (_, n2, t2)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1, t2);
            }
        }
    }
}
