//! Per-task subnetworks over a shared weight set.
//!
//! Every weight carries a learnable importance score. A task trains through
//! the top-scoring fraction of each weight tensor; once the task is
//! committed those weights join the history mask and are frozen for all
//! later tasks, which may still read them. Biases are owned per task and
//! archived alongside the task's mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward_effective, ForwardCache, MlpArchitecture, ParameterSet};
use crate::tensor::Tensor2;

/// One boolean per weight, grouped by layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMask(pub Vec<Vec<bool>>);

impl WeightMask {
    pub fn filled(arch: &MlpArchitecture, value: bool) -> Self {
        WeightMask(
            (0..arch.num_layers())
                .map(|l| {
                    let (i, o) = arch.layer_shape(l);
                    vec![value; i * o]
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.0
    }

    pub fn popcounts(&self) -> Vec<usize> {
        self.0.iter().map(|l| l.iter().filter(|&&b| b).count()).collect()
    }

    pub fn same_shape(&self, other: &WeightMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.len() == b.len())
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &WeightMask) -> bool {
        self.same_shape(other)
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    pub fn union_with(&mut self, other: &WeightMask) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x |= y;
            }
        }
    }

    /// Packs one layer into bytes, least significant bit first.
    pub fn pack_layer(bits: &[bool]) -> Vec<u8> {
        let mut out = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_layer(bytes: &[u8], len: usize) -> Vec<bool> {
        (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
    }
}

/// Number of weights a tensor of `n` entries keeps at sparsity `c`.
///
/// `c * n` is snapped to the nearest integer when it lies within rounding
/// noise of it, so e.g. `0.3 * 10` keeps 3 rather than 4.
pub fn capacity(c: f64, n: usize) -> usize {
    let x = c * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n.max(1) as f64) {
        r
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMask {
    pub task_id: u32,
    pub mask: WeightMask,
    /// Sorted, deduplicated labeled classes of the task.
    pub class_set: Vec<u32>,
}

/// A committed task: its mask and the biases it trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subnetwork {
    pub mask: TaskMask,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplementationRule {
    pub gamma: f64,
}

impl SupplementationRule {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(SupplementationRule { gamma })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredParameterSet {
    /// Shared weights; `theta.biases` are the working biases of the task
    /// currently being trained.
    pub theta: ParameterSet,
    /// Importance score per weight, laid out like `theta.weights`.
    pub scores: Vec<Vec<f64>>,
    /// Union of all committed task masks.
    pub history_mask: WeightMask,
    pub sparsity_c: f64,
    archive: Vec<Subnetwork>,
}

impl ScoredParameterSet {
    /// He-uniform weights, zero biases, scores uniform in `[0, 1)`.
    pub fn init<R: Rng>(arch: &MlpArchitecture, sparsity_c: f64, rng: &mut R) -> Result<Self> {
        if !(sparsity_c > 0.0 && sparsity_c <= 1.0) {
            return Err(Error::Config(format!("sparsity must lie in (0, 1], got {sparsity_c}")));
        }
        let theta = ParameterSet::init(arch, rng);
        let scores = theta
            .weights
            .iter()
            .map(|w| (0..w.len()).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Ok(ScoredParameterSet {
            theta,
            scores,
            history_mask: WeightMask::filled(arch, false),
            sparsity_c,
            archive: Vec::new(),
        })
    }

    /// Reassembles a set from stored parts, checking shapes.
    pub fn from_parts(
        theta: ParameterSet,
        scores: Vec<Vec<f64>>,
        history_mask: WeightMask,
        sparsity_c: f64,
        archive: Vec<Subnetwork>,
    ) -> Result<Self> {
        let shapes_ok = scores.len() == theta.weights.len()
            && history_mask.0.len() == theta.weights.len()
            && theta
                .weights
                .iter()
                .zip(&scores)
                .zip(&history_mask.0)
                .all(|((w, s), h)| w.len() == s.len() && w.len() == h.len())
            && archive.iter().all(|s| {
                s.mask.mask.same_shape(&history_mask)
                    && s.biases.len() == theta.biases.len()
                    && s.biases.iter().zip(&theta.biases).all(|(a, b)| a.len() == b.len())
            });
        if !shapes_ok {
            return Err(Error::Dimension("scored parameter parts disagree in shape".into()));
        }
        Ok(ScoredParameterSet {
            theta,
            scores,
            history_mask,
            sparsity_c,
            archive,
        })
    }

    pub fn archive(&self) -> &[Subnetwork] {
        &self.archive
    }

    pub fn subnetwork(&self, task_id: u32) -> Option<&Subnetwork> {
        self.archive.iter().find(|s| s.mask.task_id == task_id)
    }

    /// Biases used by `task_id`: archived ones once committed, the working
    /// biases otherwise.
    pub fn biases_for(&self, task_id: u32) -> &[Vec<f64>] {
        self.subnetwork(task_id)
            .map_or(&self.theta.biases, |s| &s.biases)
    }

    /// `θ ⊙ m` per layer.
    pub fn effective_weights(&self, mask: &WeightMask) -> Result<Vec<Tensor2>> {
        if !mask.same_shape(&self.history_mask) {
            return Err(Error::Dimension("mask does not match the weight layout".into()));
        }
        Ok(self
            .theta
            .weights
            .iter()
            .zip(&mask.0)
            .map(|(w, m)| {
                let mut e = w.clone();
                for (v, &keep) in e.data_mut().iter_mut().zip(m) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                e
            })
            .collect())
    }
}

/// Marks the `capacity(c, n)` highest-scoring weights of each tensor; ties go
/// to the lowest flat index.
pub fn select_mask(sps: &ScoredParameterSet, task_id: u32, class_set: &[u32]) -> Result<TaskMask> {
    if class_set.is_empty() {
        return Err(Error::Usage(format!("task {task_id} has an empty class set")));
    }
    let mask = sps
        .scores
        .iter()
        .map(|s| top_k_mask(s, capacity(sps.sparsity_c, s.len())))
        .collect();
    let mut class_set = class_set.to_vec();
    class_set.sort_unstable();
    class_set.dedup();
    Ok(TaskMask {
        task_id,
        mask: WeightMask(mask),
        class_set,
    })
}

pub(crate) fn top_k_mask(scores: &[f64], k: usize) -> Vec<bool> {
    let mut out = vec![false; scores.len()];
    if k == 0 {
        return out;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
    }
    for &i in &idx[..k] {
        out[i] = true;
    }
    out
}

/// Forward pass through the subnetwork `mask` selects.
pub fn masked_forward(
    sps: &ScoredParameterSet,
    mask: &TaskMask,
    arch: &MlpArchitecture,
    batch: &Tensor2,
) -> Result<(Tensor2, ForwardCache)> {
    if !sps.theta.matches(arch) {
        return Err(Error::Dimension("parameters do not match architecture".into()));
    }
    let weights = sps.effective_weights(&mask.mask)?;
    forward_effective(arch, weights, sps.biases_for(mask.task_id), batch)
}

/// Splits effective-weight gradients into the weight update direction and the
/// straight-through score gradient.
///
/// Weight gradients keep only the current mask's coordinates and are zero on
/// every frozen coordinate; bias gradients pass through. Score gradients are
/// `∂L/∂(θ⊙m) · θ` for every weight, selected or not.
pub fn split_gradients(
    effective_grad: &ParameterSet,
    sps: &ScoredParameterSet,
    mask: &TaskMask,
) -> Result<(ParameterSet, Vec<Vec<f64>>)> {
    if !effective_grad.same_shape(&sps.theta) || !mask.mask.same_shape(&sps.history_mask) {
        return Err(Error::Dimension("gradient does not match parameters".into()));
    }
    let mut theta_grad = effective_grad.clone();
    let mut score_grad = Vec::with_capacity(sps.scores.len());
    for l in 0..theta_grad.weights.len() {
        let theta = sps.theta.weights[l].data();
        let m = &mask.mask.0[l];
        let frozen = &sps.history_mask.0[l];
        let g = theta_grad.weights[l].data_mut();
        score_grad.push(g.iter().zip(theta).map(|(gi, ti)| gi * ti).collect());
        for i in 0..g.len() {
            if !m[i] || frozen[i] {
                g[i] = 0.0;
            }
        }
    }
    Ok((theta_grad, score_grad))
}

/// Score update with gradient supplementation:
/// `s -= (η·g)·γ` where the weight is in the history mask or outside the
/// current mask, `s -= η·g` otherwise.
pub fn supplemented_score_step(
    sps: &mut ScoredParameterSet,
    score_grad: &[Vec<f64>],
    mask: &TaskMask,
    rule: SupplementationRule,
    eta: f64,
) -> Result<()> {
    let shapes_ok = score_grad.len() == sps.scores.len()
        && score_grad.iter().zip(&sps.scores).all(|(g, s)| g.len() == s.len())
        && mask.mask.same_shape(&sps.history_mask);
    if !shapes_ok {
        return Err(Error::Dimension("score gradient does not match scores".into()));
    }
    let layers = sps.scores.iter_mut().zip(score_grad).zip(&sps.history_mask.0).zip(&mask.mask.0);
    for (((scores, grads), hist), cur) in layers {
        for (i, (s, &g)) in scores.iter_mut().zip(grads).enumerate() {
            if hist[i] || !cur[i] {
                *s -= eta * g * rule.gamma;
            } else {
                *s -= eta * g;
            }
        }
    }
    Ok(())
}

/// Folds a finished task into the history mask and archives it.
pub fn commit_task(sps: &mut ScoredParameterSet, mask: TaskMask) -> Result<()> {
    if sps.subnetwork(mask.task_id).is_some() {
        return Err(Error::Usage(format!("task {} is already committed", mask.task_id)));
    }
    if !mask.mask.same_shape(&sps.history_mask) {
        return Err(Error::Dimension("mask does not match the weight layout".into()));
    }
    sps.history_mask.union_with(&mask.mask);
    let biases = sps.theta.biases.clone();
    sps.archive.push(Subnetwork { mask, biases });
    Ok(())
}
