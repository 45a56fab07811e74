//! Feature, prediction, and neighbor-index memory banks.
//!
//! Three aligned stores over the target data: normalized feature rows,
//! softmax prediction rows, and for every stored sample the indices of its
//! top-K most similar stored samples by cosine similarity (a dot product,
//! since feature rows are unit norm). Mini-batch training replaces the
//! feature/prediction rows of the current batch and recomputes the neighbor
//! rows of exactly those samples; everything else keeps its last value.
//!
//! Expanded neighbors (the neighbors of a sample's neighbors) are read
//! straight out of the neighbor bank; no similarity computation is needed
//! for them.
//!
//! With a bank fraction below one, only a seeded uniform subsample of the
//! dataset is stored; updates addressed to unstored samples are skipped and
//! counted.

use crate::data::LabeledDataset;
use crate::error::{CacError, Result};
use crate::matrix::{self, Matrix};
use crate::model::{model_forward, ModelParams};
use crate::rng::Rng;
use std::collections::{BTreeSet, HashMap};
use std::io::Write;

/// An anchor's nearest stored samples, ordered by descending similarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub anchor: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Banks {
    /// Stored feature rows, unit norm, one per stored sample.
    features: Matrix,
    /// Stored softmax rows, aligned with `features`.
    predictions: Matrix,
    /// Dataset indices of each stored sample's K nearest stored samples.
    neighbors: Vec<Vec<usize>>,
    /// Dataset indices actually stored, ascending. Identity when the whole
    /// dataset is banked.
    stored: Vec<usize>,
    row_of: HashMap<usize, usize>,
    dataset_len: usize,
    k: usize,
    skipped_updates: u64,
}

impl Banks {
    /// Builds banks from pre-computed parts, validating every invariant.
    /// Mostly useful for tests that need hand-built neighbor tables.
    pub fn from_parts(
        features: Matrix,
        predictions: Matrix,
        neighbors: Vec<Vec<usize>>,
        stored: Vec<usize>,
        dataset_len: usize,
        k: usize,
    ) -> Result<Self> {
        let row_of: HashMap<usize, usize> =
            stored.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let banks = Banks {
            features,
            predictions,
            neighbors,
            stored,
            row_of,
            dataset_len,
            k,
            skipped_updates: 0,
        };
        banks.validate()?;
        Ok(banks)
    }

    /// Checks the structural invariants: unit feature rows, normalized
    /// prediction rows, and K distinct in-range non-self neighbor indices.
    pub fn validate(&self) -> Result<()> {
        let m = self.stored.len();
        if self.features.rows() != m || self.predictions.rows() != m || self.neighbors.len() != m {
            return Err(CacError::Shape("bank row counts disagree".into()));
        }
        for (row, &idx) in self.stored.iter().enumerate() {
            if idx >= self.dataset_len {
                return Err(CacError::Shape(format!(
                    "stored index {idx} outside dataset of {}",
                    self.dataset_len
                )));
            }
            let f = self.features.row(row);
            let norm = matrix::dot(f, f).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(CacError::Numeric(format!(
                    "feature bank row {row} has norm {norm}"
                )));
            }
            let psum: f64 = self.predictions.row(row).iter().sum();
            if (psum - 1.0).abs() > 1e-9 {
                return Err(CacError::Numeric(format!(
                    "prediction bank row {row} sums to {psum}"
                )));
            }
            let nbrs = &self.neighbors[row];
            if nbrs.len() != self.k {
                return Err(CacError::Shape(format!(
                    "neighbor row {row} holds {} indices, expected {}",
                    nbrs.len(),
                    self.k
                )));
            }
            let distinct: BTreeSet<usize> = nbrs.iter().copied().collect();
            if distinct.len() != nbrs.len() {
                return Err(CacError::Shape(format!("neighbor row {row} repeats an index")));
            }
            for &j in nbrs {
                if j == idx {
                    return Err(CacError::Shape(format!("neighbor row {row} contains itself")));
                }
                if !self.row_of.contains_key(&j) {
                    return Err(CacError::Shape(format!(
                        "neighbor row {row} names unstored sample {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn stored_count(&self) -> usize {
        self.stored.len()
    }

    pub fn stored_indices(&self) -> &[usize] {
        &self.stored
    }

    pub fn dataset_len(&self) -> usize {
        self.dataset_len
    }

    pub fn contains(&self, dataset_index: usize) -> bool {
        self.row_of.contains_key(&dataset_index)
    }

    /// Updates addressed at unstored samples since init (fraction mode).
    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    pub fn feature_row(&self, dataset_index: usize) -> Option<&[f64]> {
        self.row_of
            .get(&dataset_index)
            .map(|&r| self.features.row(r))
    }

    pub fn prediction_row(&self, dataset_index: usize) -> Option<&[f64]> {
        self.row_of
            .get(&dataset_index)
            .map(|&r| self.predictions.row(r))
    }

    pub fn neighbor_row(&self, dataset_index: usize) -> Option<&[usize]> {
        self.row_of
            .get(&dataset_index)
            .map(|&r| self.neighbors[r].as_slice())
    }

    pub fn neighbor_set(&self, anchor: usize) -> Option<NeighborSet> {
        self.neighbor_row(anchor).map(|members| NeighborSet {
            anchor,
            members: members.to_vec(),
        })
    }

    /// For each query row, the `k` stored samples with the highest dot
    /// product against the feature bank. The sample named by `exclude[i]`
    /// (the query's own dataset index) never appears in row i's result.
    /// Ties break toward the smaller dataset index.
    pub fn topk_neighbors(
        &self,
        query_features: &Matrix,
        k: usize,
        exclude: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        if query_features.rows() != exclude.len() {
            return Err(CacError::Shape(format!(
                "{} query rows but {} exclusion indices",
                query_features.rows(),
                exclude.len()
            )));
        }
        if query_features.cols() != self.features.cols() {
            return Err(CacError::Shape("query feature width mismatch".into()));
        }
        (0..query_features.rows())
            .map(|q| {
                topk_scan(
                    &self.features,
                    &self.stored,
                    query_features.row(q),
                    exclude[q],
                    k,
                )
            })
            .collect()
    }

    /// Replaces the stored feature/prediction rows of the batch, then
    /// recomputes the neighbor rows of exactly those samples against the
    /// updated feature bank. Rows outside the batch are untouched.
    ///
    /// Indices beyond the dataset are an error. Indices inside the dataset
    /// but not stored (fraction mode) are skipped and counted.
    pub fn update(
        &mut self,
        batch_indices: &[usize],
        features: &Matrix,
        probs: &Matrix,
    ) -> Result<()> {
        if features.rows() != batch_indices.len() || probs.rows() != batch_indices.len() {
            return Err(CacError::Shape("batch rows do not align with indices".into()));
        }
        if features.cols() != self.features.cols() || probs.cols() != self.predictions.cols() {
            return Err(CacError::Shape("batch column widths do not match banks".into()));
        }
        for (slot, &idx) in batch_indices.iter().enumerate() {
            if idx >= self.dataset_len {
                return Err(CacError::Shape(format!(
                    "batch index {idx} outside stored capacity {}",
                    self.dataset_len
                )));
            }
            let f = features.row(slot);
            let norm = matrix::dot(f, f).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(CacError::Numeric(format!(
                    "batch feature row {slot} is not normalized (norm {norm})"
                )));
            }
        }
        // Replace every row first so neighbor recomputation sees the fully
        // updated feature bank.
        for (slot, &idx) in batch_indices.iter().enumerate() {
            match self.row_of.get(&idx) {
                Some(&row) => {
                    self.features.set_row(row, features.row(slot));
                    self.predictions.set_row(row, probs.row(slot));
                }
                None => self.skipped_updates += 1,
            }
        }
        for &idx in batch_indices {
            if let Some(&row) = self.row_of.get(&idx) {
                self.neighbors[row] =
                    topk_scan(&self.features, &self.stored, self.features.row(row), idx, self.k)?;
            }
        }
        Ok(())
    }

    /// The union of the neighbor rows of `i`'s neighbors, read directly from
    /// the neighbor bank. May include `i` itself.
    pub fn expanded_neighbors(&self, i: usize) -> Result<BTreeSet<usize>> {
        let nbrs = self
            .neighbor_row(i)
            .ok_or_else(|| CacError::Shape(format!("sample {i} is not stored")))?;
        let mut expanded = BTreeSet::new();
        for &h in nbrs {
            if let Some(second) = self.neighbor_row(h) {
                expanded.extend(second.iter().copied());
            }
        }
        Ok(expanded)
    }

    /// Fraction of (anchor, neighbor) pairs that share a label.
    pub fn neighborhood_purity(&self, labels: &[usize]) -> f64 {
        let mut matches = 0usize;
        let mut total = 0usize;
        for (row, &idx) in self.stored.iter().enumerate() {
            for &j in &self.neighbors[row] {
                total += 1;
                if labels[idx] == labels[j] {
                    matches += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            matches as f64 / total as f64
        }
    }

    /// Debug dump: one CSV per bank (features.csv, predictions.csv,
    /// neighbors.csv), each row prefixed with its dataset index.
    pub fn dump_csv(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let write_matrix = |name: &str, m: &Matrix, prefix: &str| -> Result<()> {
            let mut file = std::fs::File::create(dir.join(name))?;
            let header: Vec<String> = (0..m.cols()).map(|c| format!("{prefix}{c}")).collect();
            writeln!(file, "index,{}", header.join(","))?;
            for (row, &idx) in self.stored.iter().enumerate() {
                let cells: Vec<String> = m.row(row).iter().map(|v| v.to_string()).collect();
                writeln!(file, "{idx},{}", cells.join(","))?;
            }
            Ok(())
        };
        write_matrix("features.csv", &self.features, "f")?;
        write_matrix("predictions.csv", &self.predictions, "p")?;
        let mut file = std::fs::File::create(dir.join("neighbors.csv"))?;
        let header: Vec<String> = (0..self.k).map(|c| format!("n{c}")).collect();
        writeln!(file, "index,{}", header.join(","))?;
        for (row, &idx) in self.stored.iter().enumerate() {
            let cells: Vec<String> = self.neighbors[row].iter().map(|v| v.to_string()).collect();
            writeln!(file, "{idx},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// One full-scan top-k query against the stored feature rows.
fn topk_scan(
    features: &Matrix,
    stored: &[usize],
    query: &[f64],
    exclude: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = stored
        .iter()
        .enumerate()
        .filter(|&(_, &idx)| idx != exclude)
        .map(|(row, &idx)| (matrix::dot(query, features.row(row)), idx))
        .collect();
    if k > scored.len() {
        return Err(CacError::Config(format!(
            "k = {k} exceeds the {} available candidates",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, idx)| idx).collect())
}

/// Fills all three banks from one forward pass of the model over the
/// dataset. With `fraction < 1`, a seeded uniform subsample of the dataset
/// indices is stored instead of all of them.
pub fn init_banks(
    params: &ModelParams,
    dataset: &LabeledDataset,
    k: usize,
    fraction: f64,
    seed: u64,
) -> Result<Banks> {
    let n = dataset.len();
    if n == 0 {
        return Err(CacError::Config("cannot bank an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CacError::Config(format!(
            "bank fraction {fraction} outside (0, 1]"
        )));
    }
    let stored: Vec<usize> = if fraction < 1.0 {
        let m = ((n as f64 * fraction).round() as usize).clamp(1, n);
        Rng::new(seed).sample_indices(n, m)
    } else {
        (0..n).collect()
    };
    if k >= stored.len() {
        return Err(CacError::Config(format!(
            "k = {k} must be smaller than the {} stored samples",
            stored.len()
        )));
    }

    let out = model_forward(params, &dataset.x)?;
    let normalized = matrix::l2_normalize_rows(&out.features)?;
    let features = normalized.gather_rows(&stored);
    let predictions = out.probs.gather_rows(&stored);

    let neighbors = stored
        .iter()
        .enumerate()
        .map(|(row, &idx)| topk_scan(&features, &stored, features.row(row), idx, k))
        .collect::<Result<Vec<_>>>()?;

    Banks::from_parts(features, predictions, neighbors, stored, n, k)
}
