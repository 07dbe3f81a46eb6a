//! Weight and trainer checkpoints in the object framing.
//!
//! A weight checkpoint is one `WGHT` frame: `u32` tensor count, then
//! `(u64 rows, u64 cols)` per tensor, then every tensor's values row-major as
//! `f64` LE. A trainer checkpoint is `WGHT`, `CFGJ` (config as JSON) and
//! `ITER` (`u64` iteration, timesteps_total, episodes_total) in that order.

use std::path::Path;

use crate::framing::{expect_tag, put_f64s, read_frames, tags, Codec, FrameError, Reader, TypeTag};

use super::{Progress, TrainError, TrainerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCheckpoint {
    pub shapes: Vec<(usize, usize)>,
    pub data: Vec<f64>,
}

impl WeightCheckpoint {
    pub fn new(shapes: Vec<(usize, usize)>, data: Vec<f64>) -> Result<Self, FrameError> {
        let want: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if want != data.len() {
            return Err(FrameError::Corrupt(format!(
                "shapes cover {want} values, data has {}",
                data.len()
            )));
        }
        Ok(Self { shapes, data })
    }
}

impl Codec for WeightCheckpoint {
    const TAG: TypeTag = tags::WEIGHTS;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for (r, c) in &self.shapes {
            out.extend_from_slice(&(*r as u64).to_le_bytes());
            out.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        put_f64s(out, &self.data);
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            shapes.push((r.u64()? as usize, r.u64()? as usize));
        }
        let total = shapes
            .iter()
            .try_fold(0usize, |acc, (a, b)| a.checked_mul(*b).and_then(|x| acc.checked_add(x)))
            .ok_or_else(|| FrameError::Corrupt("tensor sizes overflow".into()))?;
        let data = r.f64s(total)?;
        r.finish()?;
        Self::new(shapes, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerCheckpoint {
    pub weights: WeightCheckpoint,
    pub config: TrainerConfig,
    pub progress: Progress,
}

impl TrainerCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.weights.to_frame();
        crate::framing::write_frame(&mut out, tags::CONFIG_JSON, self.config.to_json().as_bytes());
        let mut iter = Vec::with_capacity(24);
        for v in [
            self.progress.iteration,
            self.progress.timesteps_total,
            self.progress.episodes_total,
        ] {
            iter.extend_from_slice(&v.to_le_bytes());
        }
        crate::framing::write_frame(&mut out, tags::ITERATION, &iter);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FrameError> {
        let frames = read_frames(bytes)?;
        if frames.len() != 3 {
            return Err(FrameError::Corrupt(format!("expected 3 frames, found {}", frames.len())));
        }
        expect_tag(tags::WEIGHTS, frames[0].0)?;
        expect_tag(tags::CONFIG_JSON, frames[1].0)?;
        expect_tag(tags::ITERATION, frames[2].0)?;
        let weights = WeightCheckpoint::decode_payload(frames[0].1)?;
        let json = std::str::from_utf8(frames[1].1).map_err(|e| FrameError::Corrupt(e.to_string()))?;
        let config = TrainerConfig::from_json(json).map_err(|e| FrameError::Corrupt(e.to_string()))?;
        let mut r = Reader::new(frames[2].1);
        let progress = Progress {
            iteration: r.u64()?,
            timesteps_total: r.u64()?,
            episodes_total: r.u64()?,
            ..Progress::default()
        };
        r.finish()?;
        Ok(Self {
            weights,
            config,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
