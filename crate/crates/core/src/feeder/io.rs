//! Embedding pool files.
//!
//! Binary layout (all integers little-endian):
//! `b"AIDE-EMB"`, `u32` version, `u32` dimension, `u64` count, then `count`
//! records of `u16` id length, UTF-8 id bytes, `dimension` x `f32`.
//! The JSON-lines variant holds one `{"id": ..., "vec": [...]}` per line.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"AIDE-EMB";
const VERSION: u32 = 1;

pub fn write_binary(store: &EmbeddingStore, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + store.len() * (12 + store.dim() * 4));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (id, v) in store.iter() {
        let bytes = id.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::InvalidData(format!("image id too long: {id}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        for x in v.values() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("<embedding stream>", e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::InvalidData("truncated embedding file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_binary(mut input: impl Read) -> Result<EmbeddingStore> {
    let mut data = Vec::new();
    input
        .read_to_end(&mut data)
        .map_err(|e| Error::io("<embedding stream>", e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != EMBEDDING_MAGIC {
        return Err(Error::InvalidData("bad embedding file magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let dim = c.u32()? as usize;
    let count = c.u64()?;
    let mut store = EmbeddingStore::new(dim);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let id = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::InvalidData("image id is not UTF-8".into()))?
            .to_string();
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(c.f32()? as f64);
        }
        store.insert(id, EmbeddingVector::new(values)?)?;
    }
    if c.pos != data.len() {
        return Err(Error::InvalidData("trailing bytes in embedding file".into()));
    }
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    vec: Vec<f64>,
}

pub fn write_jsonl(store: &EmbeddingStore, mut out: impl Write) -> Result<()> {
    for (id, v) in store.iter() {
        let line = serde_json::to_string(&JsonRecord {
            id: id.to_string(),
            vec: v.values().to_vec(),
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io("<embedding stream>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<EmbeddingStore> {
    let mut store: Option<EmbeddingStore> = None;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<embedding stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        let v = EmbeddingVector::new(rec.vec)?;
        store
            .get_or_insert_with(|| EmbeddingStore::new(v.dim()))
            .insert(rec.id, v)?;
    }
    store.ok_or(Error::EmptyStore)
}

/// Open either format, sniffing the magic bytes.
pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.starts_with(EMBEDDING_MAGIC) {
        read_binary(&data[..])
    } else {
        read_jsonl(&data[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut s = EmbeddingStore::new(2);
        s.insert("ab", EmbeddingVector::new(vec![1.0, -0.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_binary(&s, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"AIDE-EMB");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..26], &2u16.to_le_bytes());
        assert_eq!(&buf[26..28], b"ab");
        assert_eq!(&buf[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&buf[32..36], &(-0.5f32).to_le_bytes());
        assert_eq!(buf.len(), 36);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut s = EmbeddingStore::new(2);
        s.insert("a", EmbeddingVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_binary(&s, &mut buf).unwrap();
        assert!(read_binary(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_binary(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn both_formats_round_trip(
            rows in proptest::collection::vec(proptest::collection::vec(-4.0f32..4.0, 3), 1..20)
        ) {
            let mut s = EmbeddingStore::new(3);
            for (i, r) in rows.iter().enumerate() {
                if r.iter().all(|x| *x == 0.0) { continue; }
                s.insert(format!("id-{i}"), EmbeddingVector::new(r.iter().map(|x| *x as f64).collect()).unwrap()).unwrap();
            }
            prop_assume!(!s.is_empty());
            let mut bin = Vec::new();
            write_binary(&s, &mut bin).unwrap();
            let back = read_binary(&bin[..]).unwrap();
            let mut jl = Vec::new();
            write_jsonl(&s, &mut jl).unwrap();
            let back_jl = read_jsonl(&jl[..]).unwrap();
            for ((a, va), ((b, vb), (c, vc))) in s.iter().zip(back.iter().zip(back_jl.iter())) {
                prop_assert_eq!(a, b);
                prop_assert_eq!(a, c);
                prop_assert_eq!(va, vb);
                prop_assert_eq!(va, vc);
            }
        }
    }
}
