//! Columnar experience container.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("column `{column}` has {found} entries, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
}

/// Well-known names of extra columns.
pub mod columns {
    pub const LOGP: &str = "logp";
    pub const VF_PREDS: &str = "vf_preds";
    pub const ADVANTAGES: &str = "advantages";
    pub const VALUE_TARGETS: &str = "value_targets";
    pub const TD_ERROR: &str = "td_error";
    /// Bootstrap multiplier after an n-step transform: `γ^m`, or 0 at episode end.
    pub const DISCOUNT: &str = "discount";
}

/// Column layout shared by batches that may be concatenated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchema {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub extra: Vec<String>,
}

/// Experience rows `(o_t, h_t, a_t, h_{t+1}, y…, r_t, o_{t+1})` stored column
/// by column. Multi-wide columns (`obs`, `actions`, `new_obs`, `h`, `h_next`)
/// are row-major. `extra` holds auxiliary policy outputs and postprocessor
/// results keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub new_obs: Vec<f64>,
    pub h: Vec<f64>,
    pub h_next: Vec<f64>,
    pub eps_id: Vec<u64>,
    pub agent_id: Vec<u32>,
    pub t_index: Vec<u32>,
    pub extra: BTreeMap<String, Vec<f64>>,
}

/// One row detached from its batch; extra values follow the schema's key order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub new_obs: Vec<f64>,
    pub h: Vec<f64>,
    pub h_next: Vec<f64>,
    pub eps_id: u64,
    pub agent_id: u32,
    pub t_index: u32,
    pub extra: Vec<f64>,
}

/// Fields of a single environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<'a> {
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub reward: f64,
    pub done: bool,
    pub new_obs: &'a [f64],
    pub eps_id: u64,
    pub agent_id: u32,
    pub t_index: u32,
}

impl SampleBatch {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            ..Self::default()
        }
    }

    pub fn from_schema(schema: &BatchSchema) -> Self {
        let mut b = Self::new(schema.obs_dim, schema.action_dim);
        b.state_dim = schema.state_dim;
        for k in &schema.extra {
            b.extra.insert(k.clone(), Vec::new());
        }
        b
    }

    pub fn schema(&self) -> BatchSchema {
        BatchSchema {
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            state_dim: self.state_dim,
            extra: self.extra.keys().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Appends a transition with empty hidden state.
    pub fn push(&mut self, tr: Transition<'_>) {
        debug_assert_eq!(tr.obs.len(), self.obs_dim);
        debug_assert_eq!(tr.action.len(), self.action_dim);
        self.obs.extend_from_slice(tr.obs);
        self.actions.extend_from_slice(tr.action);
        self.rewards.push(tr.reward);
        self.dones.push(tr.done);
        self.new_obs.extend_from_slice(tr.new_obs);
        self.eps_id.push(tr.eps_id);
        self.agent_id.push(tr.agent_id);
        self.t_index.push(tr.t_index);
    }

    /// Checks that every column agrees with the row count.
    pub fn validate(&self) -> Result<(), BatchError> {
        let n = self.len();
        let expect = |column: &str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(BatchError::LengthMismatch {
                    column: column.to_string(),
                    expected,
                    found,
                })
            }
        };
        expect("obs", n * self.obs_dim, self.obs.len())?;
        expect("actions", n * self.action_dim, self.actions.len())?;
        expect("dones", n, self.dones.len())?;
        expect("new_obs", n * self.obs_dim, self.new_obs.len())?;
        expect("h", n * self.state_dim, self.h.len())?;
        expect("h_next", n * self.state_dim, self.h_next.len())?;
        expect("eps_id", n, self.eps_id.len())?;
        expect("agent_id", n, self.agent_id.len())?;
        expect("t_index", n, self.t_index.len())?;
        for (k, v) in &self.extra {
            expect(k, n, v.len())?;
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64], BatchError> {
        self.extra
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| BatchError::MissingColumn(name.to_string()))
    }

    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<(), BatchError> {
        if values.len() != self.len() {
            return Err(BatchError::LengthMismatch {
                column: name.to_string(),
                expected: self.len(),
                found: values.len(),
            });
        }
        self.extra.insert(name.to_string(), values);
        Ok(())
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn new_obs_row(&self, i: usize) -> &[f64] {
        &self.new_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn obs_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.obs_dim, self.obs.clone()).expect("validated obs column")
    }

    pub fn new_obs_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.obs_dim, self.new_obs.clone()).expect("validated new_obs column")
    }

    /// Maximal runs of rows sharing `(eps_id, agent_id)`.
    pub fn episode_segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.eps_id[i] != self.eps_id[start] || self.agent_id[i] != self.agent_id[start] {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> BatchRow {
        let s = self.state_dim;
        BatchRow {
            obs: self.obs_row(i).to_vec(),
            actions: self.action_row(i).to_vec(),
            reward: self.rewards[i],
            done: self.dones[i],
            new_obs: self.new_obs_row(i).to_vec(),
            h: self.h[i * s..(i + 1) * s].to_vec(),
            h_next: self.h_next[i * s..(i + 1) * s].to_vec(),
            eps_id: self.eps_id[i],
            agent_id: self.agent_id[i],
            t_index: self.t_index[i],
            extra: self.extra.values().map(|c| c[i]).collect(),
        }
    }

    pub fn push_row(&mut self, row: &BatchRow) -> Result<(), BatchError> {
        if row.extra.len() != self.extra.len() || row.obs.len() != self.obs_dim || row.actions.len() != self.action_dim {
            return Err(BatchError::SchemaMismatch("row does not fit batch schema".into()));
        }
        self.obs.extend_from_slice(&row.obs);
        self.actions.extend_from_slice(&row.actions);
        self.rewards.push(row.reward);
        self.dones.push(row.done);
        self.new_obs.extend_from_slice(&row.new_obs);
        self.h.extend_from_slice(&row.h);
        self.h_next.extend_from_slice(&row.h_next);
        self.eps_id.push(row.eps_id);
        self.agent_id.push(row.agent_id);
        self.t_index.push(row.t_index);
        for (col, v) in self.extra.values_mut().zip(&row.extra) {
            col.push(*v);
        }
        Ok(())
    }

    pub fn from_rows(schema: &BatchSchema, rows: &[BatchRow]) -> Result<Self, BatchError> {
        let mut b = Self::from_schema(schema);
        for r in rows {
            b.push_row(r)?;
        }
        Ok(b)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut b = Self::from_schema(&self.schema());
        for &i in indices {
            b.push_row(&self.row(i)).expect("same schema");
        }
        b
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        let (s, e) = (range.start, range.end);
        let sd = self.state_dim;
        Self {
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            state_dim: sd,
            obs: self.obs[s * self.obs_dim..e * self.obs_dim].to_vec(),
            actions: self.actions[s * self.action_dim..e * self.action_dim].to_vec(),
            rewards: self.rewards[range.clone()].to_vec(),
            dones: self.dones[range.clone()].to_vec(),
            new_obs: self.new_obs[s * self.obs_dim..e * self.obs_dim].to_vec(),
            h: self.h[s * sd..e * sd].to_vec(),
            h_next: self.h_next[s * sd..e * sd].to_vec(),
            eps_id: self.eps_id[range.clone()].to_vec(),
            agent_id: self.agent_id[range.clone()].to_vec(),
            t_index: self.t_index[range.clone()].to_vec(),
            extra: self.extra.iter().map(|(k, v)| (k.clone(), v[range.clone()].to_vec())).collect(),
        }
    }

    /// Concatenates rows in argument order. Empty batches are skipped, so
    /// they concatenate with anything.
    pub fn concat(batches: &[SampleBatch]) -> Result<SampleBatch, BatchError> {
        let mut non_empty = batches.iter().filter(|b| !b.is_empty());
        let Some(first) = non_empty.next() else {
            return Ok(batches.first().cloned().unwrap_or_default());
        };
        let schema = first.schema();
        let mut out = first.clone();
        for b in non_empty {
            if b.schema() != schema {
                return Err(BatchError::SchemaMismatch(alloc::format!(
                    "{:?} vs {:?}",
                    schema,
                    b.schema()
                )));
            }
            out.obs.extend_from_slice(&b.obs);
            out.actions.extend_from_slice(&b.actions);
            out.rewards.extend_from_slice(&b.rewards);
            out.dones.extend_from_slice(&b.dones);
            out.new_obs.extend_from_slice(&b.new_obs);
            out.h.extend_from_slice(&b.h);
            out.h_next.extend_from_slice(&b.h_next);
            out.eps_id.extend_from_slice(&b.eps_id);
            out.agent_id.extend_from_slice(&b.agent_id);
            out.t_index.extend_from_slice(&b.t_index);
            for (k, v) in &b.extra {
                out.extra.get_mut(k).expect("schema checked").extend_from_slice(v);
            }
        }
        Ok(out)
    }

    /// Bytes of raw column data.
    pub fn byte_size(&self) -> usize {
        let floats = self.obs.len()
            + self.actions.len()
            + self.rewards.len()
            + self.new_obs.len()
            + self.h.len()
            + self.h_next.len()
            + self.extra.values().map(Vec::len).sum::<usize>();
        floats * 8 + self.dones.len() + self.eps_id.len() * 8 + self.agent_id.len() * 4 + self.t_index.len() * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn toy(rows: usize, eps: u64) -> SampleBatch {
        let mut b = SampleBatch::new(2, 1);
        for t in 0..rows {
            let o = [t as f64, eps as f64];
            let n = [t as f64 + 1.0, eps as f64];
            b.push(Transition {
                obs: &o,
                action: &[(t % 2) as f64],
                reward: t as f64 * 0.5,
                done: t + 1 == rows,
                new_obs: &n,
                eps_id: eps,
                agent_id: 0,
                t_index: t as u32,
            });
        }
        b.set_column("vf_preds", (0..rows).map(|i| i as f64).collect()).unwrap();
        b
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let b = toy(3, 1);
        assert_eq!(SampleBatch::concat(&[b.clone(), SampleBatch::default()]).unwrap(), b);
        assert_eq!(SampleBatch::concat(&[SampleBatch::default(), b.clone()]).unwrap(), b);
    }

    #[test]
    fn concat_matches_row_copy() {
        let (a, b) = (toy(3, 1), toy(4, 2));
        let cat = SampleBatch::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.len(), 7);
        cat.validate().unwrap();
        let mut naive = SampleBatch::from_schema(&a.schema());
        for src in [&a, &b] {
            for i in 0..src.len() {
                naive.push_row(&src.row(i)).unwrap();
            }
        }
        assert_eq!(cat, naive);
    }

    #[test]
    fn concat_rejects_schema_mismatch() {
        let a = toy(2, 0);
        let mut b = toy(2, 1);
        b.extra.clear();
        assert!(matches!(SampleBatch::concat(&[a, b]), Err(BatchError::SchemaMismatch(_))));
    }

    #[test]
    fn segments_follow_episode_ids() {
        let cat = SampleBatch::concat(&[toy(3, 1), toy(2, 2), toy(1, 3)]).unwrap();
        assert_eq!(cat.episode_segments(), vec![0..3, 3..5, 5..6]);
    }

    #[test]
    fn slice_and_select_agree() {
        let b = toy(5, 4);
        assert_eq!(b.slice(1..4), b.select(&[1, 2, 3]));
    }

    #[test]
    fn missing_column_and_length_checks() {
        let mut b = toy(2, 0);
        assert_eq!(b.column("advantages"), Err(BatchError::MissingColumn("advantages".into())));
        assert!(b.set_column("x", vec![1.0]).is_err());
        b.rewards.push(0.0);
        assert!(b.validate().is_err());
    }
}
