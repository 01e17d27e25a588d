//! Training objectives: labeled cross-entropy, weak/strong contrastive loss
//! on logits, thresholded pseudo-label cross-entropy, and their weighted sum.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the logits it was given, ready for [`crate::nn::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{softmax_in_place, Tensor2};

/// Exponent arguments of the contrastive loss are clamped to this value.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    /// Confidence a weak-view prediction must exceed to be kept.
    pub threshold: f64,
    /// Additive stabiliser inside the contrastive denominators.
    pub eps_stab: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            threshold: 0.95,
            eps_stab: 1e-8,
        }
    }
}

/// Value and logit gradient of a single-input loss.
#[derive(Clone, Debug)]
pub struct LossPart {
    pub value: f64,
    pub grad: Tensor2,
    /// The batch was degenerate and contributed nothing.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct ContrastivePart {
    pub value: f64,
    pub grad_weak: Tensor2,
    pub grad_strong: Tensor2,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PseudoPart {
    pub value: f64,
    pub grad_strong: Tensor2,
    pub kept: usize,
}

/// Combined objective and the logit gradients of each constituent batch.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub l_labeled: f64,
    pub l_contrastive: f64,
    pub l_pseudo: f64,
    pub l_total: f64,
    pub grad_labeled: Tensor2,
    pub grad_weak: Tensor2,
    pub grad_strong: Tensor2,
    pub pseudo_kept: usize,
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn labeled_ce(logits: &Tensor2, labels: &[u32]) -> Result<LossPart> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        log::debug!("empty labeled batch skipped");
        return Ok(LossPart {
            value: 0.0,
            grad: Tensor2::zeros(0, logits.cols()),
            skipped: true,
        });
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::Usage(format!("label {bad} outside a {k}-class output")));
    }
    let n = logits.rows() as f64;
    let mut grad = logits.softmax_rows();
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        value -= log_softmax_at(logits.row(r), y as usize);
        let row = grad.row_mut(r);
        row[y as usize] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(LossPart {
        value: value / n,
        grad,
        skipped: false,
    })
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// Contrastive loss between weak and strong views, with dot-product
/// similarity on the logits.
///
/// The batch is `{x_1, x̂_1, ..., x_N, x̂_N}`. For every anchor `u` (weak or
/// strong view of sample `i`) with partner `π(u)` (the other view):
///
/// `-min(S(u, π(u)), 50) + ln(Σ_{z ≠ u} exp(min(S(u, z), 50)) + eps)`
///
/// summed over all `2N` anchors, minus `2·eps` per sample. Only the anchor
/// itself is excluded from its denominator; the partner stays in it.
pub fn contrastive_u(weak: &Tensor2, strong: &Tensor2, eps_stab: f64) -> Result<ContrastivePart> {
    if !weak.same_shape(strong) {
        return Err(Error::Dimension("weak and strong logits differ in shape".into()));
    }
    let n = weak.rows();
    let k = weak.cols();
    if n < 2 {
        log::debug!("contrastive batch of {n} skipped");
        return Ok(ContrastivePart {
            value: 0.0,
            grad_weak: Tensor2::zeros(n, k),
            grad_strong: Tensor2::zeros(n, k),
            skipped: true,
        });
    }
    // Interleave views: row 2i = x_i, row 2i+1 = x̂_i.
    let mut views = Tensor2::zeros(2 * n, k);
    for i in 0..n {
        views.row_mut(2 * i).copy_from_slice(weak.row(i));
        views.row_mut(2 * i + 1).copy_from_slice(strong.row(i));
    }
    let gram = views.matmul_nt(&views)?;
    let m = 2 * n;

    // Per anchor: its loss term and the row of dL/dS(u, ·).
    let rows = par::map_range(m, |u| {
        let partner = u ^ 1;
        let s = gram.row(u);
        let mut coef = vec![0.0; m];
        let mut denom = eps_stab;
        for z in 0..m {
            if z != u {
                let e = s[z].min(EXP_CLAMP).exp();
                coef[z] = e;
                denom += e;
            }
        }
        for z in 0..m {
            if z != u {
                coef[z] = if s[z] < EXP_CLAMP { coef[z] / denom } else { 0.0 };
            }
        }
        if s[partner] < EXP_CLAMP {
            coef[partner] -= 1.0;
        }
        let term = -s[partner].min(EXP_CLAMP) + denom.ln();
        (term, coef)
    });

    let mut value = 0.0;
    let mut c = Tensor2::zeros(m, m);
    for (u, (term, coef)) in rows.into_iter().enumerate() {
        value += term;
        c.row_mut(u).copy_from_slice(&coef);
    }
    value -= 2.0 * eps_stab * n as f64;

    // S(u, z) = v_u · v_z, so dL/dV = (C + Cᵀ) V.
    let mut sym = c.clone();
    for u in 0..m {
        for z in 0..m {
            sym.set(u, z, c.get(u, z) + c.get(z, u));
        }
    }
    let dv = sym.matmul(&views)?;
    let mut grad_weak = Tensor2::zeros(n, k);
    let mut grad_strong = Tensor2::zeros(n, k);
    for i in 0..n {
        grad_weak.row_mut(i).copy_from_slice(dv.row(2 * i));
        grad_strong.row_mut(i).copy_from_slice(dv.row(2 * i + 1));
    }
    Ok(ContrastivePart {
        value,
        grad_weak,
        grad_strong,
        skipped: false,
    })
}

/// Cross-entropy of the strong view against the weak view's argmax class,
/// over samples whose weak-view confidence exceeds the threshold. The weak
/// view is treated as a constant target.
pub fn pseudo_label_loss(weak: &Tensor2, strong: &Tensor2, cfg: &PseudoLabelConfig) -> Result<PseudoPart> {
    if !weak.same_shape(strong) {
        return Err(Error::Dimension("weak and strong logits differ in shape".into()));
    }
    let n = weak.rows();
    let mut grad = Tensor2::zeros(n, strong.cols());
    if n == 0 {
        return Ok(PseudoPart {
            value: 0.0,
            grad_strong: grad,
            kept: 0,
        });
    }
    let mut value = 0.0;
    let mut kept = 0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let mut q = weak.row(r).to_vec();
        softmax_in_place(&mut q);
        let (label, conf) = q
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        if conf <= cfg.threshold {
            continue;
        }
        kept += 1;
        value -= log_softmax_at(strong.row(r), label);
        let g = grad.row_mut(r);
        g.copy_from_slice(strong.row(r));
        softmax_in_place(g);
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(PseudoPart {
        value: value * inv_n,
        grad_strong: grad,
        kept,
    })
}

/// `L = L_l + α·L_u + β·L_p`, with gradients accumulated the same way.
pub fn combined_loss(
    labeled: &LossPart,
    contrastive: Option<&ContrastivePart>,
    pseudo: Option<&PseudoPart>,
    alpha: f64,
    beta: f64,
) -> Result<LossBundle> {
    check_finite("labeled", labeled.value, &[&labeled.grad])?;
    if let Some(c) = contrastive {
        check_finite("contrastive", c.value, &[&c.grad_weak, &c.grad_strong])?;
    }
    if let Some(p) = pseudo {
        check_finite("pseudo-label", p.value, &[&p.grad_strong])?;
    }
    let k = labeled.grad.cols();
    let unlabeled_rows = contrastive
        .map(|c| c.grad_weak.rows())
        .or(pseudo.map(|p| p.grad_strong.rows()))
        .unwrap_or(0);
    let unlabeled_cols = contrastive
        .map(|c| c.grad_weak.cols())
        .or(pseudo.map(|p| p.grad_strong.cols()))
        .unwrap_or(k);
    let mut grad_weak = Tensor2::zeros(unlabeled_rows, unlabeled_cols);
    let mut grad_strong = Tensor2::zeros(unlabeled_rows, unlabeled_cols);
    let l_contrastive = contrastive.map_or(0.0, |c| c.value);
    let l_pseudo = pseudo.map_or(0.0, |p| p.value);
    if let Some(c) = contrastive {
        grad_weak.axpy(alpha, &c.grad_weak)?;
        grad_strong.axpy(alpha, &c.grad_strong)?;
    }
    if let Some(p) = pseudo {
        grad_strong.axpy(beta, &p.grad_strong)?;
    }
    Ok(LossBundle {
        l_labeled: labeled.value,
        l_contrastive,
        l_pseudo,
        l_total: labeled.value + alpha * l_contrastive + beta * l_pseudo,
        grad_labeled: labeled.grad.clone(),
        grad_weak,
        grad_strong,
        pseudo_kept: pseudo.map_or(0, |p| p.kept),
    })
}

fn check_finite(name: &str, value: f64, grads: &[&Tensor2]) -> Result<()> {
    if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("{name} loss is not finite")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
            .unwrap()
    }

    /// Softmax cross-entropy written without shared helpers.
    fn ce_oracle(logits: &Tensor2, labels: &[u32]) -> f64 {
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[y as usize].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    /// The contrastive formula evaluated term by term over the 2N batch.
    fn contrastive_oracle(weak: &Tensor2, strong: &Tensor2, eps: f64) -> f64 {
        let n = weak.rows();
        let mut batch: Vec<&[f64]> = Vec::new();
        for i in 0..n {
            batch.push(weak.row(i));
            batch.push(strong.row(i));
        }
        let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().min(50.0);
        let mut total = 0.0;
        for i in 0..n {
            let (x, xh) = (2 * i, 2 * i + 1);
            let pos = sim(batch[x], batch[xh]).exp();
            let d1: f64 = (0..2 * n).filter(|&z| z != x).map(|z| sim(batch[x], batch[z]).exp()).sum();
            let d2: f64 = (0..2 * n).filter(|&z| z != xh).map(|z| sim(batch[z], batch[xh]).exp()).sum();
            total += -((pos / (d1 + eps)).ln() + (pos / (d2 + eps)).ln() + 2.0 * eps);
        }
        total
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = labeled_ce(&Tensor2::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let mut t = Tensor2::zeros(1, 4);
        t.set(0, 2, 1000.0);
        assert!(labeled_ce(&t, &[2]).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn ce_matches_oracle_and_gradient() {
        let logits = random(5, 6, 3.0, 1);
        let labels = [0, 5, 2, 2, 1];
        let part = labeled_ce(&logits, &labels).unwrap();
        assert!((part.value - ce_oracle(&logits, &labels)).abs() < 1e-10);
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (ce_oracle(&p, &labels) - ce_oracle(&m, &labels)) / (2.0 * h);
            assert!((fd - part.grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn ce_edge_cases() {
        let empty = labeled_ce(&Tensor2::zeros(0, 3), &[]).unwrap();
        assert!(empty.skipped && empty.value == 0.0);
        assert!(matches!(labeled_ce(&Tensor2::zeros(1, 3), &[3]), Err(Error::Usage(_))));
    }

    #[test]
    fn identical_views_match_brute_force() {
        let v = Tensor2::filled(2, 3, 0.5);
        let part = contrastive_u(&v, &v, 1e-8).unwrap();
        let expect = contrastive_oracle(&v, &v, 1e-8);
        assert!((part.value - expect).abs() < 1e-12);
        // all similarities equal: each log term is ln(3 + eps') and there are 4
        let s: f64 = 0.75;
        let per = -(s.exp() / (3.0 * s.exp() + 1e-8)).ln();
        assert!((part.value - (4.0 * per - 4.0 * 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_oracle_on_random_batches() {
        for seed in 0..5 {
            let w = random(4, 5, 2.0, seed);
            let s = random(4, 5, 2.0, seed + 100);
            let part = contrastive_u(&w, &s, 1e-3).unwrap();
            let expect = contrastive_oracle(&w, &s, 1e-3);
            assert!((part.value - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let w = random(3, 4, 1.0, 7);
        let s = random(3, 4, 1.0, 8);
        let eps = 1e-8;
        let part = contrastive_u(&w, &s, eps).unwrap();
        let h = 1e-5;
        for (which, base, grad) in [(0, &w, &part.grad_weak), (1, &s, &part.grad_strong)] {
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += h;
                let mut m = base.clone();
                m.data_mut()[i] -= h;
                let (fp, fm) = if which == 0 {
                    (contrastive_oracle(&p, &s, eps), contrastive_oracle(&m, &s, eps))
                } else {
                    (contrastive_oracle(&w, &p, eps), contrastive_oracle(&w, &m, eps))
                };
                let fd = (fp - fm) / (2.0 * h);
                let a = grad.data()[i];
                assert!((fd - a).abs() <= 1e-4 * a.abs().max(1e-3), "view {which} coord {i}");
            }
        }
    }

    #[test]
    fn clamped_similarities_carry_no_gradient() {
        let w = Tensor2::filled(2, 2, 10.0);
        let part = contrastive_u(&w, &w, 1e-8).unwrap();
        assert!(part.grad_weak.data().iter().all(|&v| v == 0.0));
        assert!(part.value.is_finite());
    }

    #[test]
    fn eps_enters_linearly_when_denominators_dominate() {
        let w = random(3, 4, 1.0, 2);
        let s = random(3, 4, 1.0, 3);
        let a = contrastive_u(&w, &s, 0.0).unwrap().value;
        let delta = 1e-9;
        let b = contrastive_u(&w, &s, delta).unwrap().value;
        // additive part contributes -2Nδ, the denominators add O(δ / Σ exp)
        let additive = -2.0 * 3.0 * delta;
        assert!((b - a - additive).abs() < 6.0 * delta);
    }

    #[test]
    fn contrastive_is_symmetric_in_views() {
        let w = random(5, 3, 1.5, 11);
        let s = random(5, 3, 1.5, 12);
        let a = contrastive_u(&w, &s, 0.0).unwrap();
        let b = contrastive_u(&s, &w, 0.0).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
    }

    #[test]
    fn single_sample_contrast_is_skipped() {
        let w = random(1, 3, 1.0, 0);
        assert!(contrastive_u(&w, &w, 1e-8).unwrap().skipped);
    }

    #[test]
    fn threshold_one_keeps_nothing() {
        let w = random(4, 3, 5.0, 4);
        let p = pseudo_label_loss(&w, &w, &PseudoLabelConfig { threshold: 1.0, eps_stab: 1e-8 }).unwrap();
        assert_eq!(p.kept, 0);
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn confident_weak_uniform_strong_gives_ln4() {
        let mut weak = Tensor2::zeros(4, 4);
        weak.set(0, 1, 1000.0);
        weak.set(1, 3, 1000.0);
        let strong = Tensor2::zeros(4, 4);
        let p = pseudo_label_loss(&weak, &strong, &PseudoLabelConfig::default()).unwrap();
        assert_eq!(p.kept, 2);
        assert!((p.value - 2.0 * 4f64.ln() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn agreeing_confident_views_give_near_zero() {
        let mut weak = Tensor2::zeros(2, 3);
        weak.set(0, 0, 40.0);
        weak.set(1, 2, 40.0);
        let p = pseudo_label_loss(&weak, &weak, &PseudoLabelConfig::default()).unwrap();
        assert_eq!(p.kept, 2);
        assert!(p.value < 1e-12);
    }

    #[test]
    fn pseudo_gradient_matches_finite_differences() {
        let mut weak = random(4, 3, 1.0, 5);
        weak.set(0, 0, 9.0);
        weak.set(2, 1, 9.0);
        let strong = random(4, 3, 1.0, 6);
        let cfg = PseudoLabelConfig { threshold: 0.9, eps_stab: 1e-8 };
        let part = pseudo_label_loss(&weak, &strong, &cfg).unwrap();
        assert_eq!(part.kept, 2);
        let h = 1e-5;
        for i in 0..strong.len() {
            let mut p = strong.clone();
            p.data_mut()[i] += h;
            let mut m = strong.clone();
            m.data_mut()[i] -= h;
            let fd = (pseudo_label_loss(&weak, &p, &cfg).unwrap().value
                - pseudo_label_loss(&weak, &m, &cfg).unwrap().value)
                / (2.0 * h);
            assert!((fd - part.grad_strong.data()[i]).abs() < 1e-8);
        }
    }

    fn part(value: f64, rows: usize) -> LossPart {
        LossPart { value, grad: Tensor2::filled(rows, 2, 0.5), skipped: false }
    }

    #[test]
    fn combined_weights_are_linear() {
        let l = part(1.0, 2);
        let c = ContrastivePart {
            value: 2.0,
            grad_weak: Tensor2::filled(3, 2, 1.0),
            grad_strong: Tensor2::filled(3, 2, 2.0),
            skipped: false,
        };
        let p = PseudoPart { value: 0.5, grad_strong: Tensor2::filled(3, 2, 4.0), kept: 2 };
        let zero = combined_loss(&l, Some(&c), Some(&p), 0.0, 0.0).unwrap();
        assert_eq!(zero.l_total, 1.0);
        let only_c = combined_loss(&l, Some(&c), Some(&p), 1.0, 0.0).unwrap();
        assert_eq!(only_c.l_total, 3.0);
        let mixed = combined_loss(&l, Some(&c), Some(&p), 0.3, 0.7).unwrap();
        assert!((mixed.l_total - (1.0 + 0.3 * 2.0 + 0.7 * 0.5)).abs() < 1e-12);
        assert!((mixed.grad_strong.get(0, 0) - (0.3 * 2.0 + 0.7 * 4.0)).abs() < 1e-12);
        assert_eq!(mixed.pseudo_kept, 2);
    }

    #[test]
    fn combined_names_non_finite_part() {
        let l = part(1.0, 2);
        let p = PseudoPart { value: f64::NAN, grad_strong: Tensor2::zeros(1, 2), kept: 0 };
        match combined_loss(&l, None, Some(&p), 1.0, 1.0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("pseudo")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
