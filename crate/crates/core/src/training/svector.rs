use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};

/// Trainable per-sequence s-vectors (rows) and their segment counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SVectorTable {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    pub vectors: Array2<f64>,
    counts: Vec<usize>,
}

impl SVectorTable {
    /// Zero-initialized table, one row per `(sequence_id, segment_count)`.
    pub fn new(entries: &[(String, usize)], dim: usize) -> Result<Self> {
        ensure!(!entries.is_empty(), "s-vector table needs at least one sequence");
        ensure!(dim >= 1, "s-vector dimension must be >= 1");
        let mut index = BTreeMap::new();
        for (i, (id, n)) in entries.iter().enumerate() {
            ensure!(*n >= 1, "sequence {id} has no segments");
            ensure!(index.insert(id.clone(), i).is_none(), "duplicate sequence id {id}");
        }
        Ok(Self {
            ids: entries.iter().map(|(id, _)| id.clone()).collect(),
            index,
            vectors: Array2::zeros((entries.len(), dim)),
            counts: entries.iter().map(|(_, n)| *n).collect(),
        })
    }

    pub fn from_parts(ids: Vec<String>, counts: Vec<usize>, vectors: Array2<f64>) -> Result<Self> {
        ensure!(ids.len() == counts.len() && ids.len() == vectors.nrows(), "s-vector table parts disagree in length");
        let entries: Vec<(String, usize)> = ids.into_iter().zip(counts).collect();
        let mut t = Self::new(&entries, vectors.ncols())?;
        ensure!(vectors.iter().all(|v| v.is_finite()), "s-vectors must be finite");
        t.vectors = vectors;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn row_of(&self, sequence_id: &str) -> Result<usize> {
        self.index.get(sequence_id).copied().ok_or_else(|| Error::Lookup(format!("sequence {sequence_id} is not in the s-vector table")))
    }

    pub fn get(&self, sequence_id: &str) -> Result<Array1<f64>> {
        Ok(self.vectors.row(self.row_of(sequence_id)?).to_owned())
    }

    pub fn segment_count(&self, sequence_id: &str) -> Result<usize> {
        Ok(self.counts[self.row_of(sequence_id)?])
    }
}
