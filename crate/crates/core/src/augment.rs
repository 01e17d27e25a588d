//! Weak and strong image augmentations on flattened square grids.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMode {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub image_side: usize,
    /// Largest shift in pixels along each axis.
    pub max_shift: i32,
    pub flip_p: f64,
    /// Gaussian pixel noise of the strong view.
    pub noise_sigma: f64,
    /// Largest erased rectangle of the strong view, as an area fraction.
    pub erase_max_area: f64,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn new(image_side: usize, seed: u64) -> Self {
        AugmentationPolicy {
            image_side,
            max_shift: 2,
            flip_p: 0.5,
            noise_sigma: 0.2,
            erase_max_area: 0.25,
            seed,
        }
    }
}

/// Erased rectangle: rows `top..top+height`, columns `left..left+width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A fully drawn augmentation for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub shift_x: i32,
    pub shift_y: i32,
    pub flip: bool,
    /// Per-pixel additive noise; empty for the weak view.
    pub noise: Vec<f64>,
    pub erase: Option<EraseRect>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            shift_x: 0,
            shift_y: 0,
            flip: false,
            noise: Vec::new(),
            erase: None,
        }
    }
}

/// Draws the augmentation of one sample; a pure function of
/// `(policy.seed, sample_index, mode)`.
pub fn draw_params(policy: &AugmentationPolicy, mode: AugmentMode, sample_index: u64) -> AugmentParams {
    let mode_tag = match mode {
        AugmentMode::Weak => 0,
        AugmentMode::Strong => 1,
    };
    let mut rng = rng::stream(&[tag::AUGMENT, policy.seed, sample_index, mode_tag]);
    let side = policy.image_side;
    let s = policy.max_shift;
    let shift_x = rng.gen_range(-s..=s);
    let shift_y = rng.gen_range(-s..=s);
    let flip = rng.gen::<f64>() < policy.flip_p;
    if mode == AugmentMode::Weak {
        return AugmentParams {
            shift_x,
            shift_y,
            flip,
            noise: Vec::new(),
            erase: None,
        };
    }
    let noise = (0..side * side)
        .map(|_| policy.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let area = rng.gen::<f64>() * policy.erase_max_area * (side * side) as f64;
    let aspect = rng.gen_range(0.5..2.0f64);
    let height = ((area * aspect).sqrt().round() as usize).min(side);
    let mut width = ((area / aspect).sqrt().round() as usize).min(side);
    let cap = (policy.erase_max_area * (side * side) as f64).floor() as usize;
    while height * width > cap && width > 0 {
        width -= 1;
    }
    let top = rng.gen_range(0..=side - height);
    let left = rng.gen_range(0..=side - width);
    let erase = (height > 0 && width > 0).then_some(EraseRect {
        top,
        left,
        height,
        width,
    });
    AugmentParams {
        shift_x,
        shift_y,
        flip,
        noise,
        erase,
    }
}

/// Applies drawn parameters to one `side x side` image: shift (zero fill),
/// horizontal flip, noise, erase, then clamp to `[0, 1]`.
pub fn apply_params(image: &[f64], side: usize, p: &AugmentParams) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let n = side as i32;
    for r in 0..n {
        for c in 0..n {
            let src_r = r - p.shift_y;
            let mut src_c = c - p.shift_x;
            if p.flip {
                src_c = n - 1 - src_c;
            }
            if (0..n).contains(&src_r) && (0..n).contains(&src_c) {
                out[(r * n + c) as usize] = image[(src_r * n + src_c) as usize];
            }
        }
    }
    for (v, e) in out.iter_mut().zip(&p.noise) {
        *v += e;
    }
    if let Some(rect) = p.erase {
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                out[r * side + c] = 0.0;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Augments each row of `batch`; row `i` is keyed by `sample_indices[i]`.
pub fn augment(
    batch: &Tensor2,
    policy: &AugmentationPolicy,
    mode: AugmentMode,
    sample_indices: &[u64],
) -> Result<Tensor2> {
    let side = policy.image_side;
    if batch.cols() != side * side {
        return Err(Error::Dimension(format!(
            "rows of {} values are not {side}x{side} images",
            batch.cols()
        )));
    }
    if sample_indices.len() != batch.rows() {
        return Err(Error::Dimension("one sample index per row is required".into()));
    }
    let mut out = Tensor2::zeros(batch.rows(), batch.cols());
    for (r, &idx) in sample_indices.iter().enumerate() {
        let params = draw_params(policy, mode, idx);
        let img = apply_params(batch.row(r), side, &params);
        out.row_mut(r).copy_from_slice(&img);
    }
    Ok(out)
}
