//! Binary object framing: `u64` LE payload length, 4-byte type tag, payload.
//!
//! Every value that enters the object store, every checkpoint and every batch
//! dump is a sequence of such frames.

use std::collections::BTreeMap;

use rldist_core::batch::SampleBatch;
use thiserror::Error;

pub const HEADER_LEN: usize = 12;

/// Four ASCII bytes identifying a payload type.
pub type TypeTag = [u8; 4];

pub mod tags {
    use super::TypeTag;
    pub const F64_VEC: TypeTag = *b"F64V";
    pub const BYTES: TypeTag = *b"BYTE";
    pub const UTF8: TypeTag = *b"UTF8";
    pub const U64: TypeTag = *b"U64_";
    pub const SAMPLE_BATCH: TypeTag = *b"SBAT";
    pub const BATCH_HEADER: TypeTag = *b"BHDR";
    pub const COLUMN: TypeTag = *b"COLN";
    pub const COMPRESSED_BATCH: TypeTag = *b"CBAT";
    pub const WIRE_BATCH: TypeTag = *b"WBAT";
    pub const REPLAY_BATCH: TypeTag = *b"RBAT";
    pub const WEIGHTS: TypeTag = *b"WGHT";
    pub const CONFIG_JSON: TypeTag = *b"CFGJ";
    pub const ITERATION: TypeTag = *b"ITER";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("truncated frame: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("expected tag {expected:?}, found {found:?}")]
    TagMismatch { expected: String, found: String },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

pub fn tag_name(tag: TypeTag) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

pub fn write_frame(out: &mut Vec<u8>, tag: TypeTag, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&tag);
    out.extend_from_slice(payload);
}

/// Splits the first frame off `bytes`: `(tag, payload, rest)`.
pub fn read_frame(bytes: &[u8]) -> Result<(TypeTag, &[u8], &[u8]), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let tag: TypeTag = bytes[8..12].try_into().expect("4 bytes");
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN + len,
            available: bytes.len(),
        });
    }
    Ok((tag, &body[..len], &body[len..]))
}

/// All frames in `bytes`, which must contain nothing else.
pub fn read_frames(mut bytes: &[u8]) -> Result<Vec<(TypeTag, &[u8])>, FrameError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (tag, payload, rest) = read_frame(bytes)?;
        out.push((tag, payload));
        bytes = rest;
    }
    Ok(out)
}

pub fn expect_tag(expected: TypeTag, found: TypeTag) -> Result<(), FrameError> {
    if expected == found {
        Ok(())
    } else {
        Err(FrameError::TagMismatch {
            expected: tag_name(expected),
            found: tag_name(found),
        })
    }
}

/// A value with a framed binary representation.
pub trait Codec: Sized {
    const TAG: TypeTag;

    fn encode_payload(&self, out: &mut Vec<u8>);

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError>;

    fn to_frame(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        self.encode_payload(&mut payload);
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        write_frame(&mut out, Self::TAG, &payload);
        out
    }

    /// Decodes a buffer holding exactly one frame of this type.
    fn from_frame(bytes: &[u8]) -> Result<Self, FrameError> {
        let (tag, payload, rest) = read_frame(bytes)?;
        expect_tag(Self::TAG, tag)?;
        if !rest.is_empty() {
            return Err(FrameError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Self::decode_payload(payload)
    }
}

/// Little-endian cursor over a payload.
pub struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.bytes.len() < n {
            return Err(FrameError::Truncated {
                needed: n,
                available: self.bytes.len(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FrameError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FrameError::Corrupt("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn remaining(&self) -> &'a [u8] {
        self.bytes
    }

    pub fn finish(self) -> Result<(), FrameError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(FrameError::Corrupt(format!("{} unread bytes", self.bytes.len())))
        }
    }
}

pub fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Codec for Vec<f64> {
    const TAG: TypeTag = tags::F64_VEC;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        put_f64s(out, self);
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() % 8 != 0 {
            return Err(FrameError::Corrupt("f64 payload not a multiple of 8".into()));
        }
        Reader::new(bytes).f64s(bytes.len() / 8)
    }
}

impl Codec for Vec<u8> {
    const TAG: TypeTag = tags::BYTES;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self);
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        Ok(bytes.to_vec())
    }
}

impl Codec for String {
    const TAG: TypeTag = tags::UTF8;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.as_bytes());
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        String::from_utf8(bytes.to_vec()).map_err(|e| FrameError::Corrupt(e.to_string()))
    }
}

impl Codec for u64 {
    const TAG: TypeTag = tags::U64;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(bytes);
        let v = r.u64()?;
        r.finish()?;
        Ok(v)
    }
}

/// Element type of one batch column record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ColumnType {
    F64 = 0,
    Bool = 1,
    U64 = 2,
    U32 = 3,
}

impl ColumnType {
    fn from_u8(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            0 => ColumnType::F64,
            1 => ColumnType::Bool,
            2 => ColumnType::U64,
            3 => ColumnType::U32,
            other => return Err(FrameError::Corrupt(format!("unknown column type {other}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            ColumnType::F64 | ColumnType::U64 => 8,
            ColumnType::Bool => 1,
            ColumnType::U32 => 4,
        }
    }
}

/// Payload of a `COLN` record: name length (u32), UTF-8 name, element type
/// (u8), element count (u64), little-endian elements.
pub fn encode_column(name: &str, ty: ColumnType, count: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + name.len() + data.len());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(ty as u8);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(data);
    out
}

pub struct Column<'a> {
    pub name: String,
    pub ty: ColumnType,
    pub count: usize,
    pub data: &'a [u8],
}

pub fn decode_column(payload: &[u8]) -> Result<Column<'_>, FrameError> {
    let mut r = Reader::new(payload);
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|e| FrameError::Corrupt(e.to_string()))?
        .to_string();
    let ty = ColumnType::from_u8(r.u8()?)?;
    let count = r.u64()? as usize;
    let data = r.remaining();
    if data.len() != count * ty.width() {
        return Err(FrameError::Corrupt(format!("column `{name}` has {} bytes for {count} elements", data.len())));
    }
    Ok(Column { name, ty, count, data })
}

fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 8);
    put_f64s(&mut out, xs);
    out
}

fn column_f64s(c: &Column<'_>) -> Result<Vec<f64>, FrameError> {
    if c.ty != ColumnType::F64 {
        return Err(FrameError::Corrupt(format!("column `{}` is not f64", c.name)));
    }
    Reader::new(c.data).f64s(c.count)
}

/// One `COLN` record per column: the fixed columns in layout order, then
/// extra columns in name order.
pub fn batch_records(batch: &SampleBatch) -> Vec<(String, Vec<u8>)> {
    let mut cols: Vec<(String, Vec<u8>)> = Vec::new();
    let n = batch.len();
    let mut push = |name: &str, ty: ColumnType, count: usize, data: Vec<u8>| {
        cols.push((name.to_string(), encode_column(name, ty, count, &data)));
    };
    push("obs", ColumnType::F64, batch.obs.len(), f64_bytes(&batch.obs));
    push("actions", ColumnType::F64, batch.actions.len(), f64_bytes(&batch.actions));
    push("rewards", ColumnType::F64, n, f64_bytes(&batch.rewards));
    push("dones", ColumnType::Bool, n, batch.dones.iter().map(|d| *d as u8).collect());
    push("new_obs", ColumnType::F64, batch.new_obs.len(), f64_bytes(&batch.new_obs));
    push("h", ColumnType::F64, batch.h.len(), f64_bytes(&batch.h));
    push("h_next", ColumnType::F64, batch.h_next.len(), f64_bytes(&batch.h_next));
    push("eps_id", ColumnType::U64, n, batch.eps_id.iter().flat_map(|x| x.to_le_bytes()).collect());
    push("agent_id", ColumnType::U32, n, batch.agent_id.iter().flat_map(|x| x.to_le_bytes()).collect());
    push("t_index", ColumnType::U32, n, batch.t_index.iter().flat_map(|x| x.to_le_bytes()).collect());
    for (name, values) in &batch.extra {
        push(name, ColumnType::F64, values.len(), f64_bytes(values));
    }
    cols
}

/// `BHDR` payload: `obs_dim`, `action_dim`, `state_dim` (u32 each), rows (u64).
pub fn batch_header(batch: &SampleBatch) -> Vec<u8> {
    let mut h = Vec::with_capacity(20);
    h.extend_from_slice(&(batch.obs_dim as u32).to_le_bytes());
    h.extend_from_slice(&(batch.action_dim as u32).to_le_bytes());
    h.extend_from_slice(&(batch.state_dim as u32).to_le_bytes());
    h.extend_from_slice(&(batch.len() as u64).to_le_bytes());
    h
}

/// Rebuilds a batch from its header payload and decoded column records.
pub fn batch_from_records<'a>(
    header: &[u8],
    columns: impl IntoIterator<Item = Column<'a>>,
) -> Result<SampleBatch, FrameError> {
    let mut r = Reader::new(header);
    let obs_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let state_dim = r.u32()? as usize;
    let rows = r.u64()? as usize;
    r.finish()?;
    let mut b = SampleBatch::new(obs_dim, action_dim);
    b.state_dim = state_dim;
    let mut extra = BTreeMap::new();
    for c in columns {
        match c.name.as_str() {
            "obs" => b.obs = column_f64s(&c)?,
            "actions" => b.actions = column_f64s(&c)?,
            "rewards" => b.rewards = column_f64s(&c)?,
            "new_obs" => b.new_obs = column_f64s(&c)?,
            "h" => b.h = column_f64s(&c)?,
            "h_next" => b.h_next = column_f64s(&c)?,
            "dones" => b.dones = c.data.iter().map(|x| *x != 0).collect(),
            "eps_id" => {
                b.eps_id = c
                    .data
                    .chunks_exact(8)
                    .map(|x| u64::from_le_bytes(x.try_into().expect("8 bytes")))
                    .collect()
            }
            "agent_id" | "t_index" => {
                let v: Vec<u32> = c
                    .data
                    .chunks_exact(4)
                    .map(|x| u32::from_le_bytes(x.try_into().expect("4 bytes")))
                    .collect();
                if c.name == "agent_id" {
                    b.agent_id = v;
                } else {
                    b.t_index = v;
                }
            }
            _ => {
                extra.insert(c.name.clone(), column_f64s(&c)?);
            }
        }
    }
    b.extra = extra;
    b.validate().map_err(|e| FrameError::Corrupt(e.to_string()))?;
    if b.len() != rows {
        return Err(FrameError::Corrupt(format!("header says {rows} rows, columns hold {}", b.len())));
    }
    Ok(b)
}

/// Payload = `BHDR` record followed by one `COLN` record per column; the
/// same byte layout as a batch dump file.
impl Codec for SampleBatch {
    const TAG: TypeTag = tags::SAMPLE_BATCH;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        write_frame(out, tags::BATCH_HEADER, &batch_header(self));
        for (_, col) in batch_records(self) {
            write_frame(out, tags::COLUMN, &col);
        }
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let frames = read_frames(bytes)?;
        let (first, rest) = frames
            .split_first()
            .ok_or_else(|| FrameError::Corrupt("empty batch payload".into()))?;
        expect_tag(tags::BATCH_HEADER, first.0)?;
        let cols = rest
            .iter()
            .map(|(tag, payload)| {
                expect_tag(tags::COLUMN, *tag)?;
                decode_column(payload)
            })
            .collect::<Result<Vec<_>, _>>()?;
        batch_from_records(first.1, cols)
    }
}
