//! TKVC container codec.
//!
//! Little-endian throughout. Layout (byte offsets):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0   | 4  | magic `"TKVC"` |
//! | 4   | 4  | `u32` format version (1) |
//! | 8   | 1  | `u8` kind: 1 chunk cache, 2 model weights |
//! | 9   | 1  | `u8` dtype: 1 f64, 2 f32 |
//! | 10  | 2  | `u16` reserved, zero |
//! | 12  | 44 | model config: 7 × `u32` then `f64` rope base, `f64` norm eps |
//! | 56  | 32 | fingerprint |
//! | 88  | 32 | chunk id (zero for weights) |
//! | 120 | 4  | `u32` token count `T` |
//! | 124 | 4  | `u32` section count `S` |
//! | 128 | 4T | token ids, `u32` each |
//! | …   | 32S | section table: 16-byte NUL-padded ASCII tag, `u32` rows, `u32` cols, `u64` absolute data offset |
//! | …   | …  | section data, row-major, contiguous, in table order |
//!
//! The file ends exactly where the last section ends.

use crate::error::{Error, Result};
use crate::model::{Fingerprint, ModelConfig};
use crate::numerics::Matrix;
use crate::tokenizer::TokenId;

pub const MAGIC: &[u8; 4] = b"TKVC";
pub const FORMAT_VERSION: u32 = 1;

const FIXED_HEADER_LEN: usize = 128;
const SECTION_ENTRY_LEN: usize = 32;
const TAG_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    ChunkCache = 1,
    Weights = 2,
}

/// On-disk element type. Compute is always f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StorageDtype {
    #[default]
    F64,
    F32,
}

impl StorageDtype {
    fn code(self) -> u8 {
        match self {
            StorageDtype::F64 => 1,
            StorageDtype::F32 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(StorageDtype::F64),
            2 => Ok(StorageDtype::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            StorageDtype::F64 => 8,
            StorageDtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub tag: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

/// Everything recoverable from the header alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub kind: ContainerKind,
    pub dtype: StorageDtype,
    pub config: ModelConfig,
    pub fingerprint: Fingerprint,
    pub chunk_id: [u8; 32],
    pub tokens: Vec<TokenId>,
    pub sections: Vec<SectionInfo>,
}

impl Header {
    /// Total file length implied by the header.
    pub fn expected_len(&self) -> u64 {
        match self.sections.last() {
            Some(s) => s.offset + (s.rows * s.cols * self.dtype.size()) as u64,
            None => self.data_start() as u64,
        }
    }

    fn data_start(&self) -> usize {
        FIXED_HEADER_LEN + 4 * self.tokens.len() + SECTION_ENTRY_LEN * self.sections.len()
    }
}

pub struct Container {
    pub kind: ContainerKind,
    pub dtype: StorageDtype,
    pub config: ModelConfig,
    pub fingerprint: Fingerprint,
    pub chunk_id: [u8; 32],
    pub tokens: Vec<TokenId>,
    pub sections: Vec<(String, Matrix)>,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let table_start = FIXED_HEADER_LEN + 4 * c.tokens.len();
    let data_start = table_start + SECTION_ENTRY_LEN * c.sections.len();
    let data_len: usize = c
        .sections
        .iter()
        .map(|(_, m)| m.data().len() * c.dtype.size())
        .sum();
    let mut out = Vec::with_capacity(data_start + data_len);

    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(c.kind as u8);
    out.push(c.dtype.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&c.config.to_le_bytes());
    out.extend_from_slice(&c.fingerprint.0);
    out.extend_from_slice(&c.chunk_id);
    out.extend_from_slice(&u32_len(c.tokens.len(), "token count")?.to_le_bytes());
    out.extend_from_slice(&u32_len(c.sections.len(), "section count")?.to_le_bytes());
    debug_assert_eq!(out.len(), FIXED_HEADER_LEN);
    for t in &c.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }

    let mut offset = data_start as u64;
    for (tag, m) in &c.sections {
        if tag.len() > TAG_LEN || !tag.is_ascii() {
            return Err(Error::Format(format!(
                "section tag {tag:?} is not short ASCII"
            )));
        }
        let mut tag_bytes = [0u8; TAG_LEN];
        tag_bytes[..tag.len()].copy_from_slice(tag.as_bytes());
        out.extend_from_slice(&tag_bytes);
        out.extend_from_slice(&u32_len(m.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_len(m.cols(), "cols")?.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (m.data().len() * c.dtype.size()) as u64;
    }

    for (_, m) in &c.sections {
        match c.dtype {
            StorageDtype::F64 => m
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StorageDtype::F32 => m
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated while reading {what} at byte {} of {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array32(&mut self, what: &str) -> Result<[u8; 32]> {
        Ok(self.take(32, what)?.try_into().unwrap())
    }
}

/// Parse and validate the header without touching tensor data.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a TKVC file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let kind = match r.u8("kind")? {
        1 => ContainerKind::ChunkCache,
        2 => ContainerKind::Weights,
        other => return Err(Error::Format(format!("unknown container kind {other}"))),
    };
    let dtype = StorageDtype::from_code(r.u8("dtype")?)?;
    if r.u16("reserved")? != 0 {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32("config")? as usize;
    }
    let config = ModelConfig {
        layer_num: dims[0],
        head_num: dims[1],
        kv_head_num: dims[2],
        head_size: dims[3],
        hidden_size: dims[4],
        intermediate_size: dims[5],
        vocab_size: dims[6],
        rope_base: r.f64("rope base")?,
        norm_eps: r.f64("norm eps")?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("header config invalid: {e}")))?;
    let fingerprint = Fingerprint(r.array32("fingerprint")?);
    let chunk_id = r.array32("chunk id")?;
    let token_count = r.u32("token count")? as usize;
    let section_count = r.u32("section count")? as usize;

    let raw_tokens = r.take(
        token_count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("token count overflow".into()))?,
        "token ids",
    )?;
    let tokens = raw_tokens
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let mut sections = Vec::with_capacity(section_count.min(1 << 16));
    for _ in 0..section_count {
        let tag_bytes = r.take(TAG_LEN, "section tag")?;
        let end = tag_bytes.iter().position(|&b| b == 0).unwrap_or(TAG_LEN);
        let tag = std::str::from_utf8(&tag_bytes[..end])
            .ok()
            .filter(|t| t.is_ascii())
            .ok_or_else(|| Error::Format("section tag is not ASCII".into()))?
            .to_string();
        let rows = r.u32("section rows")? as usize;
        let cols = r.u32("section cols")? as usize;
        let offset = r.u64("section offset")?;
        sections.push(SectionInfo {
            tag,
            rows,
            cols,
            offset,
        });
    }

    let header = Header {
        version,
        kind,
        dtype,
        config,
        fingerprint,
        chunk_id,
        tokens,
        sections,
    };
    let mut expected = header.data_start() as u64;
    for s in &header.sections {
        if s.offset != expected {
            return Err(Error::Format(format!(
                "section {} starts at {} but previous data ends at {expected}",
                s.tag, s.offset
            )));
        }
        expected = (s.rows as u64)
            .checked_mul(s.cols as u64)
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .and_then(|n| n.checked_add(expected))
            .ok_or_else(|| Error::Format(format!("section {} size overflows", s.tag)))?;
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let header = read_header(bytes)?;
    let expected = header.expected_len();
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "file is {} bytes, header describes {expected}",
            bytes.len()
        )));
    }
    let size = header.dtype.size();
    let sections = header
        .sections
        .iter()
        .map(|s| {
            let start = s.offset as usize;
            let raw = &bytes[start..start + s.rows * s.cols * size];
            let data = match header.dtype {
                StorageDtype::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                StorageDtype::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                    .collect(),
            };
            Ok((s.tag.clone(), Matrix::new(s.rows, s.cols, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Container {
        kind: header.kind,
        dtype: header.dtype,
        config: header.config,
        fingerprint: header.fingerprint,
        chunk_id: header.chunk_id,
        tokens: header.tokens,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            kind: ContainerKind::ChunkCache,
            dtype: StorageDtype::F64,
            config: ModelConfig::toy(),
            fingerprint: Fingerprint([7; 32]),
            chunk_id: [9; 32],
            tokens: vec![256, 1, 2, 257],
            sections: vec![
                ("a".into(), Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64)),
                ("b".into(), Matrix::filled(4, 3, -1.5)),
            ],
        }
    }

    #[test]
    fn fixed_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"TKVC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 1);
        // layer_num of the toy config
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(&bytes[56..88], &[7; 32]);
        assert_eq!(u32::from_le_bytes(bytes[120..124].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[124..128].try_into().unwrap()), 2);
        // data starts after 4 tokens and 2 table entries
        let data_start = 128 + 16 + 64;
        assert_eq!(bytes.len(), data_start + 2 * 12 * 8);
        assert_eq!(&bytes[128 + 16..128 + 16 + 1], b"a");
        let off = u64::from_le_bytes(bytes[128 + 16 + 24..128 + 16 + 32].try_into().unwrap());
        assert_eq!(off as usize, data_start);
    }

    #[test]
    fn header_alone_describes_shapes() {
        let bytes = encode(&sample()).unwrap();
        let header_len = 128 + 16 + 64;
        let h = read_header(&bytes[..header_len]).unwrap();
        assert_eq!(h.dtype, StorageDtype::F64);
        assert_eq!(h.sections[1].tag, "b");
        assert_eq!((h.sections[1].rows, h.sections[1].cols), (4, 3));
        assert_eq!(h.expected_len() as usize, bytes.len());
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_headers_rejected() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[9] = 7;
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] = 0; // layer_num 0
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut c = sample();
        c.dtype = StorageDtype::F32;
        c.sections[0].1.set(0, 0, 0.1);
        let bytes = encode(&c).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.sections[0].1.get(0, 0), f64::from(0.1f32));
        assert_eq!(encode(&back).unwrap(), bytes);
    }
}
