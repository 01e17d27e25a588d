//! Prediction across subnetworks and continual-learning metrics.
//!
//! Each committed subnetwork scores a sample; its logit for class `c` goes on
//! the stack of `c` only if `c` was labeled in that subnetwork's task. The
//! final score of a class is the mean of its stack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpArchitecture;
use crate::par;
use crate::scenario::{hex_digest, TestSplit};
use crate::tensor::Tensor2;
use crate::wsn::{masked_forward, ScoredParameterSet, TaskMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    /// Per-class stack averaging over all committed subnetworks.
    Ensemble,
    /// Only the most recently committed subnetwork, argmax over every class
    /// seen so far.
    LastSubnetwork,
}

/// Class-to-subnetwork index over the committed tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitStackEnsemble {
    masks: Vec<TaskMask>,
    /// class id -> positions in `masks` whose class set contains it.
    contributors: BTreeMap<u32, Vec<usize>>,
}

impl LogitStackEnsemble {
    pub fn from_masks(masks: Vec<TaskMask>) -> Self {
        let mut contributors: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, m) in masks.iter().enumerate() {
            for &c in &m.class_set {
                contributors.entry(c).or_default().push(i);
            }
        }
        LogitStackEnsemble { masks, contributors }
    }

    pub fn from_archive(sps: &ScoredParameterSet) -> Self {
        Self::from_masks(sps.archive().iter().map(|s| s.mask.clone()).collect())
    }

    pub fn masks(&self) -> &[TaskMask] {
        &self.masks
    }

    /// Classes with a non-empty stack, ascending.
    pub fn scored_classes(&self) -> Vec<u32> {
        self.contributors.keys().copied().collect()
    }

    pub fn contributors(&self, class: u32) -> &[usize] {
        self.contributors.get(&class).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<u32>,
    /// `rows x classes.len()` scores, column `j` belongs to `classes[j]`.
    pub scores: Tensor2,
    pub predicted: Vec<u32>,
}

fn argmax_over(scores: &Tensor2, classes: &[u32]) -> Vec<u32> {
    scores.argmax_rows().into_iter().map(|j| classes[j]).collect()
}

/// Logits of every committed subnetwork on `batch`, in archive order.
pub fn subnetwork_logits(
    ensemble: &LogitStackEnsemble,
    sps: &ScoredParameterSet,
    arch: &MlpArchitecture,
    batch: &Tensor2,
) -> Result<Vec<Tensor2>> {
    par::map(ensemble.masks(), |m| masked_forward(sps, m, arch, batch).map(|(y, _)| y))
        .into_iter()
        .collect()
}

pub fn ensemble_predict(
    ensemble: &LogitStackEnsemble,
    sps: &ScoredParameterSet,
    arch: &MlpArchitecture,
    batch: &Tensor2,
) -> Result<Prediction> {
    if ensemble.masks().is_empty() {
        return Err(Error::Usage("no committed subnetworks to predict with".into()));
    }
    let logits = subnetwork_logits(ensemble, sps, arch, batch)?;
    let classes = ensemble.scored_classes();
    let mut scores = Tensor2::zeros(batch.rows(), classes.len());
    for (j, &c) in classes.iter().enumerate() {
        let stack = ensemble.contributors(c);
        let inv = 1.0 / stack.len() as f64;
        for r in 0..batch.rows() {
            let mut sum = 0.0;
            for &t in stack {
                sum += logits[t].get(r, c as usize);
            }
            scores.set(r, j, sum * inv);
        }
    }
    let predicted = argmax_over(&scores, &classes);
    Ok(Prediction {
        classes,
        scores,
        predicted,
    })
}

/// Argmax of one subnetwork's logits restricted to `classes`.
pub fn subnetwork_predict(
    sps: &ScoredParameterSet,
    mask: &TaskMask,
    arch: &MlpArchitecture,
    batch: &Tensor2,
    classes: &[u32],
) -> Result<Prediction> {
    if classes.is_empty() {
        return Err(Error::Usage("no candidate classes".into()));
    }
    let (logits, _) = masked_forward(sps, mask, arch, batch)?;
    let mut scores = Tensor2::zeros(batch.rows(), classes.len());
    for r in 0..batch.rows() {
        for (j, &c) in classes.iter().enumerate() {
            scores.set(r, j, logits.get(r, c as usize));
        }
    }
    let predicted = argmax_over(&scores, classes);
    Ok(Prediction {
        classes: classes.to_vec(),
        scores,
        predicted,
    })
}

pub fn predict(
    mode: InferenceMode,
    ensemble: &LogitStackEnsemble,
    sps: &ScoredParameterSet,
    arch: &MlpArchitecture,
    batch: &Tensor2,
) -> Result<Vec<u32>> {
    match mode {
        InferenceMode::Ensemble => Ok(ensemble_predict(ensemble, sps, arch, batch)?.predicted),
        InferenceMode::LastSubnetwork => {
            let last = ensemble
                .masks()
                .last()
                .ok_or_else(|| Error::Usage("no committed subnetworks to predict with".into()))?;
            Ok(subnetwork_predict(sps, last, arch, batch, &ensemble.scored_classes())?.predicted)
        }
    }
}

/// One evaluation pass after training a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub accuracies: Vec<f64>,
    pub counts: Vec<usize>,
    /// SHA-256 of each committed subnetwork's probe-batch logits, archive order.
    pub digests: Vec<String>,
}

pub fn logits_digest(logits: &Tensor2) -> String {
    let bytes: Vec<u8> = logits.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    hex_digest(&bytes)
}

/// Accuracy on each split plus per-subnetwork probe digests. Rows are
/// processed `eval_batch` at a time.
pub fn evaluate_stream(
    ensemble: &LogitStackEnsemble,
    sps: &ScoredParameterSet,
    arch: &MlpArchitecture,
    splits: &[TestSplit],
    mode: InferenceMode,
    eval_batch: usize,
    probe: &Tensor2,
) -> Result<EvalRow> {
    if splits.is_empty() || splits.iter().any(|s| s.labels.is_empty()) {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let eval_batch = eval_batch.max(1);
    let mut accuracies = Vec::with_capacity(splits.len());
    let mut counts = Vec::with_capacity(splits.len());
    for split in splits {
        let n = split.labels.len();
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + eval_batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let batch = split.images.select_rows(&idx);
            let pred = predict(mode, ensemble, sps, arch, &batch)?;
            correct += pred
                .iter()
                .zip(&split.labels[start..end])
                .filter(|(p, y)| p == y)
                .count();
            start = end;
        }
        accuracies.push(correct as f64 / n as f64);
        counts.push(n);
    }
    let digests = subnetwork_logits(ensemble, sps, arch, probe)?
        .iter()
        .map(logits_digest)
        .collect();
    Ok(EvalRow {
        accuracies,
        counts,
        digests,
    })
}

/// Lower-triangular matrix: row `t` holds accuracies on tasks `0..=t` after
/// training task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub digests: Vec<Vec<String>>,
}

impl AccuracyMatrix {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row.accuracies);
        self.counts.push(row.counts);
        self.digests.push(row.digests);
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    fn final_row(&self) -> Result<&[f64]> {
        let t = self.rows.len();
        match self.rows.last() {
            Some(row) if row.len() == t => Ok(row),
            _ => Err(Error::Usage("accuracy matrix has no complete final row".into())),
        }
    }
}

/// Mean of the final row: every task weighted equally.
pub fn average_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    let row = r.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Accuracy of the final row with all test samples pooled.
pub fn pooled_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    let row = r.final_row()?;
    let counts = r.counts.last().filter(|c| c.len() == row.len()).ok_or_else(|| {
        Error::Usage("accuracy matrix lacks sample counts for its final row".into())
    })?;
    let correct: f64 = row.iter().zip(counts).map(|(a, &n)| a * n as f64).sum();
    Ok(correct / counts.iter().sum::<usize>() as f64)
}

/// `F[k] = max_{t < T} R[t][k] − R[T][k]` for every task `k` before the last.
pub fn forgetting(r: &AccuracyMatrix) -> Vec<f64> {
    let t_count = r.rows.len();
    if t_count < 2 {
        return Vec::new();
    }
    let last = &r.rows[t_count - 1];
    (0..t_count - 1)
        .map(|k| {
            let best = (k..t_count - 1)
                .map(|t| r.rows[t][k])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[k]
        })
        .collect()
}
