//! Little-endian binary files: the embedding table and the named-section container.

use std::io::{Read, Write};

use crate::error::FormatError;
use crate::pipeline::EmbeddingSet;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FGEM";
pub const EMBEDDING_VERSION: u32 = 1;
pub const CONTAINER_MAGIC: [u8; 4] = *b"FGCK";
pub const CONTAINER_VERSION: u32 = 1;

type Result<T> = std::result::Result<T, FormatError>;

/// Bounds-checked cursor over an in-memory file.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Corrupt(format!("truncated at byte {} (need {n} more)", self.at)))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| FormatError::Corrupt("length overflow".into()))?;
        Ok(self
            .bytes(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.bytes(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(FormatError::Corrupt(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| FormatError::Corrupt(format!("{what} {n} does not fit in 32 bits")))
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + set.ids.len() * 8 + set.data.len() * 8);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(set.ids.len(), "row count")?.to_le_bytes());
    out.extend_from_slice(&u32_len(set.dim, "dimension")?.to_le_bytes());
    for id in &set.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out.extend(f64_bytes(&set.data));
    Ok(out)
}

pub fn decode_embeddings(buf: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader::new(buf);
    r.magic(EMBEDDING_MAGIC)?;
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let ids = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let data = r.f64s(count.checked_mul(dim).ok_or_else(|| FormatError::Corrupt("size overflow".into()))?)?;
    r.finish()?;
    Ok(EmbeddingSet { ids, dim, data })
}

pub fn write_embeddings(w: &mut impl Write, set: &EmbeddingSet) -> Result<()> {
    w.write_all(&encode_embeddings(set)?)?;
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<EmbeddingSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_embeddings(&buf)
}

/// Ordered named byte sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.push((name.into(), payload));
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| FormatError::Corrupt(format!("missing section {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.sections.len(), "section count")?.to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&u32_len(name.len(), "section name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CONTAINER_MAGIC)?;
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(FormatError::Version(version));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| FormatError::Corrupt("section name is not UTF-8".into()))?
                .to_string();
            let size = usize::try_from(r.u64()?).map_err(|_| FormatError::Corrupt("section too large".into()))?;
            sections.push((name, r.bytes(size)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { sections })
    }
}

pub(crate) fn decode_f64s(payload: &[u8]) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(8) {
        return Err(FormatError::Corrupt("float section length is not a multiple of 8".into()));
    }
    Reader::new(payload).f64s(payload.len() / 8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet {
            ids: vec![3, u64::MAX, 0],
            dim: 2,
            data: vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI, -7.25],
        }
    }

    #[test]
    fn embedding_layout() {
        let bytes = encode_embeddings(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"FGEM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 3 * 8 + 6 * 8);
        assert_eq!(f64::from_le_bytes(bytes[40..48].try_into().unwrap()), 1.5);
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let s = sample();
        let back = decode_embeddings(&encode_embeddings(&s).unwrap()).unwrap();
        assert_eq!(back.ids, s.ids);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&s.data));
    }

    #[test]
    fn corrupt_embeddings_rejected() {
        let mut bytes = encode_embeddings(&sample()).unwrap();
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 1]), Err(FormatError::Corrupt(_))));
        bytes.push(0);
        assert!(matches!(decode_embeddings(&bytes), Err(FormatError::Corrupt(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(FormatError::BadMagic { .. })));
        let mut v = encode_embeddings(&sample()).unwrap();
        v[4] = 9;
        assert!(matches!(decode_embeddings(&v), Err(FormatError::Version(9))));
    }

    #[test]
    fn container_round_trip() {
        let mut c = Container::default();
        c.push("meta", b"{}".to_vec());
        c.push("w", f64_bytes(&[1.0, 2.0]));
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(decode_f64s(back.get("w").unwrap()).unwrap(), vec![1.0, 2.0]);
        assert!(back.get("nope").is_err());
    }
}
