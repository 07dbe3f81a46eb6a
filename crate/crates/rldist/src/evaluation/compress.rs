//! Per-column LZ4 compression of sample batches and the on-disk batch dump.

use std::fs;
use std::io;
use std::path::Path;

use rldist_core::batch::SampleBatch;

use crate::framing::{
    batch_from_records, batch_header, batch_records, decode_column, read_frame, read_frames, tags, write_frame, Codec,
    FrameError, Reader, TypeTag,
};

pub const LZ4_BLOCK: TypeTag = *b"LZ4B";
const COMPRESSED_COLUMN: TypeTag = *b"LZ4C";

/// Default obs-column size above which evaluators compress their batches.
pub const DEFAULT_COMPRESS_THRESHOLD: usize = 64 * 1024;

/// A batch whose column records are individually LZ4-compressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBatch {
    pub codec: TypeTag,
    /// Length of the uncompressed batch payload.
    pub original_len: u64,
    /// `BHDR` record, then one `LZ4C` record per column holding the raw
    /// record length (u64) and the LZ4 block.
    pub payload: Vec<u8>,
}

impl CompressedBatch {
    pub fn compressed_len(&self) -> usize {
        self.payload.len()
    }

    pub fn ratio(&self) -> f64 {
        self.original_len as f64 / self.payload.len().max(1) as f64
    }
}

pub fn compress_batch(batch: &SampleBatch) -> CompressedBatch {
    let mut payload = Vec::new();
    let header = batch_header(batch);
    write_frame(&mut payload, tags::BATCH_HEADER, &header);
    let mut original_len = (crate::framing::HEADER_LEN + header.len()) as u64;
    for (_, record) in batch_records(batch) {
        original_len += (crate::framing::HEADER_LEN + record.len()) as u64;
        let block = lz4_flex::block::compress(&record);
        let mut c = Vec::with_capacity(8 + block.len());
        c.extend_from_slice(&(record.len() as u64).to_le_bytes());
        c.extend_from_slice(&block);
        write_frame(&mut payload, COMPRESSED_COLUMN, &c);
    }
    CompressedBatch {
        codec: LZ4_BLOCK,
        original_len,
        payload,
    }
}

pub fn decompress_batch(c: &CompressedBatch) -> Result<SampleBatch, FrameError> {
    if c.codec != LZ4_BLOCK {
        return Err(FrameError::Corrupt(format!("unsupported codec {:?}", c.codec)));
    }
    let frames = read_frames(&c.payload)?;
    let (first, rest) = frames
        .split_first()
        .ok_or_else(|| FrameError::Corrupt("empty compressed batch".into()))?;
    if first.0 != tags::BATCH_HEADER {
        return Err(FrameError::Corrupt("missing batch header".into()));
    }
    let raw = rest
        .iter()
        .map(|(tag, body)| {
            if *tag != COMPRESSED_COLUMN {
                return Err(FrameError::Corrupt("unexpected record in compressed batch".into()));
            }
            let mut r = Reader::new(body);
            let len = r.u64()? as usize;
            let out = lz4_flex::block::decompress(r.remaining(), len).map_err(|e| FrameError::Corrupt(e.to_string()))?;
            if out.len() != len {
                return Err(FrameError::Corrupt("decompressed length mismatch".into()));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cols = raw.iter().map(|r| decode_column(r)).collect::<Result<Vec<_>, _>>()?;
    batch_from_records(first.1, cols)
}

impl Codec for CompressedBatch {
    const TAG: TypeTag = tags::COMPRESSED_BATCH;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.codec);
        out.extend_from_slice(&self.original_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(bytes);
        let codec: TypeTag = r.take(4)?.try_into().expect("4 bytes");
        let original_len = r.u64()?;
        Ok(Self {
            codec,
            original_len,
            payload: r.remaining().to_vec(),
        })
    }
}

/// What evaluators hand to the object store: a plain batch, or a compressed
/// one when its observations are large.
#[derive(Debug, Clone, PartialEq)]
pub enum WireBatch {
    Plain(SampleBatch),
    Compressed(CompressedBatch),
}

impl WireBatch {
    /// Compresses when the obs column exceeds `threshold` bytes.
    pub fn encode(batch: SampleBatch, threshold: usize) -> Self {
        if batch.obs.len() * 8 > threshold {
            WireBatch::Compressed(compress_batch(&batch))
        } else {
            WireBatch::Plain(batch)
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self, WireBatch::Compressed(_))
    }

    pub fn to_batch(&self) -> Result<SampleBatch, FrameError> {
        match self {
            WireBatch::Plain(b) => Ok(b.clone()),
            WireBatch::Compressed(c) => decompress_batch(c),
        }
    }

    pub fn len(&self) -> Result<usize, FrameError> {
        match self {
            WireBatch::Plain(b) => Ok(b.len()),
            WireBatch::Compressed(c) => {
                let (_, header, _) = read_frame(&c.payload)?;
                let mut r = Reader::new(header);
                r.take(12)?;
                Ok(r.u64()? as usize)
            }
        }
    }
}

/// Payload is the inner value's own frame.
impl Codec for WireBatch {
    const TAG: TypeTag = tags::WIRE_BATCH;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        match self {
            WireBatch::Plain(b) => out.extend_from_slice(&b.to_frame()),
            WireBatch::Compressed(c) => out.extend_from_slice(&c.to_frame()),
        }
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let (tag, _, _) = read_frame(bytes)?;
        match tag {
            tags::SAMPLE_BATCH => Ok(WireBatch::Plain(SampleBatch::from_frame(bytes)?)),
            tags::COMPRESSED_BATCH => Ok(WireBatch::Compressed(CompressedBatch::from_frame(bytes)?)),
            other => Err(FrameError::Corrupt(format!("unexpected tag {:?}", crate::framing::tag_name(other)))),
        }
    }
}

/// Writes `batch` as a dump file: a `BHDR` record followed by one `COLN`
/// record per column.
pub fn write_batch_dump(path: &Path, batch: &SampleBatch) -> io::Result<()> {
    let mut out = Vec::new();
    batch.encode_payload(&mut out);
    fs::write(path, out)
}

pub fn read_batch_dump(path: &Path) -> io::Result<SampleBatch> {
    let bytes = fs::read(path)?;
    SampleBatch::decode_payload(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rldist_core::batch::Transition;

    fn batch(rows: usize) -> SampleBatch {
        let mut b = SampleBatch::new(3, 1);
        for i in 0..rows {
            let x = i as f64 * 0.37;
            b.push(Transition {
                obs: &[x, x.sin(), -x],
                action: &[(i % 2) as f64],
                reward: x.cos(),
                done: i % 5 == 4,
                new_obs: &[x + 1.0, 0.0, 1.0],
                eps_id: (i / 5) as u64,
                agent_id: 0,
                t_index: (i % 5) as u32,
            });
        }
        b
    }

    #[test]
    fn compressed_round_trip() {
        let b = batch(40);
        let c = compress_batch(&b);
        assert_eq!(decompress_batch(&c).unwrap(), b);
        let framed = CompressedBatch::from_frame(&c.to_frame()).unwrap();
        assert_eq!(decompress_batch(&framed).unwrap(), b);
    }

    #[test]
    fn empty_batch_round_trip() {
        let b = SampleBatch::new(2, 1);
        assert_eq!(decompress_batch(&compress_batch(&b)).unwrap(), b);
    }

    #[test]
    fn corrupt_payload_detected() {
        let mut c = compress_batch(&batch(10));
        let n = c.payload.len();
        c.payload.truncate(n - 3);
        assert!(decompress_batch(&c).is_err());
    }

    #[test]
    fn wire_batch_threshold() {
        let small = WireBatch::encode(batch(4), DEFAULT_COMPRESS_THRESHOLD);
        assert!(!small.is_compressed());
        let big = WireBatch::encode(batch(4), 8);
        assert!(big.is_compressed());
        assert_eq!(big.len().unwrap(), 4);
        assert_eq!(WireBatch::from_frame(&big.to_frame()).unwrap(), big);
    }
}
