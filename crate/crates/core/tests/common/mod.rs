//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subnet_cil::nn::backward_inner;
use subnet_cil::wsn::TaskMask;
use subnet_cil::{
    contrastive_u, labeled_ce, masked_forward, pseudo_label_loss, select_mask, split_gradients, combined_loss,
    MlpArchitecture, ParameterSet, PseudoLabelConfig, RunConfig, ScoredParameterSet, StreamSpec, Tensor2,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Two small tasks on 8x8 images; trains in well under a second.
pub fn toy_config(num_tasks: usize) -> RunConfig {
    RunConfig {
        stream: StreamSpec {
            num_tasks,
            class_universe: 12,
            ood_classes: 2,
            classes_per_task: 4,
            repetition_rate: 0.5,
            labeled_per_class: 30,
            unlabeled_per_class: 30,
            test_per_class: 20,
            image_side: 8,
            seed: 3,
            ..StreamSpec::default()
        },
        hidden: vec![32],
        epoch_scale: 0.05,
        ..RunConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Scalar oracles

/// Plain scalar-loop MLP forward pass with ReLU hidden layers.
pub fn scalar_forward(weights: &[Tensor2], biases: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut z = b.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            for (i, ai) in a.iter().enumerate() {
                *zo += ai * w.get(i, o);
            }
        }
        if l + 1 < weights.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    a
}

/// Scores every scored class by looping over (task, class) pairs.
pub fn brute_force_stack(
    masks: &[TaskMask],
    sps: &ScoredParameterSet,
    x: &[f64],
) -> Vec<(u32, f64)> {
    let mut classes: Vec<u32> = masks.iter().flat_map(|m| m.class_set.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_task: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| {
            let weights: Vec<Tensor2> = sps
                .theta
                .weights
                .iter()
                .zip(m.mask.layers())
                .map(|(w, bits)| {
                    let data = w.data().iter().zip(bits).map(|(v, &b)| if b { *v } else { 0.0 }).collect();
                    Tensor2::from_vec(w.rows(), w.cols(), data).unwrap()
                })
                .collect();
            scalar_forward(&weights, sps.biases_for(m.task_id), x)
        })
        .collect();
    classes
        .into_iter()
        .map(|c| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (t, m) in masks.iter().enumerate() {
                if m.class_set.contains(&c) {
                    sum += per_task[t][c as usize];
                    n += 1;
                }
            }
            (c, sum / n as f64)
        })
        .collect()
}

/// One scalar AdamW update; returns `(θ, m, v)`.
#[allow(clippy::too_many_arguments)]
pub fn scalar_adamw(
    theta: f64,
    g: f64,
    m: f64,
    v: f64,
    t: i32,
    lr: f64,
    wd: f64,
) -> (f64, f64, f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let decayed = theta * (1.0 - lr * wd);
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1.powi(t));
    let v_hat = v / (1.0 - b2.powi(t));
    (decayed - lr * m_hat / (v_hat.sqrt() + eps), m, v)
}

pub fn scalar_cosine(eta_max: f64, eta_min: f64, total: u64, step: u64) -> f64 {
    let p = (step.min(total)) as f64 / total as f64;
    eta_min + (eta_max - eta_min) * (1.0 + (p * std::f64::consts::PI).cos()) / 2.0
}

/// Plain gradient-descent logistic regression, used to check that the
/// generator's classes are linearly separable.
pub fn logistic_probe(train: &Tensor2, train_y: &[usize], test: &Tensor2, test_y: &[usize], k: usize) -> f64 {
    let d = train.cols();
    let mut w = vec![vec![0.0; d + 1]; k];
    let n = train.rows() as f64;
    for _ in 0..400 {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (r, &y) in train_y.iter().enumerate() {
            let x = train.row(r);
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + x.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / s - if y == c { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += p * x[j] / n;
                }
                grad[c][d] += p / n;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= 0.5 * grad[c][j];
            }
        }
    }
    let correct = (0..test.rows())
        .filter(|&r| {
            let x = test.row(r);
            let best = (0..k)
                .max_by(|&a, &b| {
                    let za = w[a][d] + x.iter().zip(&w[a]).map(|(p, q)| p * q).sum::<f64>();
                    let zb = w[b][d] + x.iter().zip(&w[b]).map(|(p, q)| p * q).sum::<f64>();
                    za.total_cmp(&zb)
                })
                .unwrap();
            best == test_y[r]
        })
        .count();
    correct as f64 / test.rows() as f64
}

// ---------------------------------------------------------------------------
// Finite differences through the masked network

/// Small scored network (≤ 200 parameters) with a selected mask.
pub struct GradFixture {
    pub arch: MlpArchitecture,
    pub sps: ScoredParameterSet,
    pub mask: TaskMask,
    pub labeled: Tensor2,
    pub labels: Vec<u32>,
    pub weak: Tensor2,
    pub strong: Tensor2,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let arch = MlpArchitecture::new(vec![6, 10, 5]).unwrap();
        assert!(arch.num_params() <= 200);
        let mut r = rng(seed);
        let mut sps = ScoredParameterSet::init(&arch, 0.6, &mut r).unwrap();
        // Non-zero biases so that bias gradients are exercised too.
        for b in sps.theta.biases.iter_mut().flatten() {
            *b = r.gen_range(-0.3..0.3);
        }
        let mask = select_mask(&sps, 0, &[0, 1, 2, 3, 4]).unwrap();
        let labeled = random_tensor(&mut r, 6, 6, 1.0);
        let labels = (0..6).map(|_| r.gen_range(0..5)).collect();
        let weak = random_tensor(&mut r, 4, 6, 1.0);
        let strong = random_tensor(&mut r, 4, 6, 1.0);
        GradFixture {
            arch,
            sps,
            mask,
            labeled,
            labels,
            weak,
            strong,
        }
    }

    fn logits(&self, sps: &ScoredParameterSet, x: &Tensor2) -> Tensor2 {
        masked_forward(sps, &self.mask, &self.arch, x).unwrap().0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Labeled,
    Contrastive,
    Pseudo,
    Combined,
}

const ALPHA: f64 = 0.7;
const BETA: f64 = 1.3;

fn pseudo_cfg() -> PseudoLabelConfig {
    // Low enough that several samples are kept on random logits.
    PseudoLabelConfig {
        threshold: 0.25,
        eps_stab: 1e-8,
    }
}

/// Loss value and its analytic θ-gradient as produced by the library.
pub fn analytic(fx: &GradFixture, obj: Objective) -> (f64, ParameterSet) {
    let (yl, cl) = masked_forward(&fx.sps, &fx.mask, &fx.arch, &fx.labeled).unwrap();
    let (yw, cw) = masked_forward(&fx.sps, &fx.mask, &fx.arch, &fx.weak).unwrap();
    let (ys, cs) = masked_forward(&fx.sps, &fx.mask, &fx.arch, &fx.strong).unwrap();
    let lab = labeled_ce(&yl, &fx.labels).unwrap();
    let con = contrastive_u(&yw, &ys, 1e-8).unwrap();
    let pse = pseudo_label_loss(&yw, &ys, &pseudo_cfg()).unwrap();
    if matches!(obj, Objective::Pseudo) {
        assert!(pse.kept > 0, "fixture keeps no pseudo-labels");
    }
    let zero_l = Tensor2::zeros(yl.rows(), yl.cols());
    let (value, gl, gw, gs) = match obj {
        Objective::Labeled => (lab.value, lab.grad.clone(), None, None),
        Objective::Contrastive => (con.value, zero_l, Some(con.grad_weak.clone()), Some(con.grad_strong.clone())),
        Objective::Pseudo => (pse.value, zero_l, None, Some(pse.grad_strong.clone())),
        Objective::Combined => {
            let b = combined_loss(&lab, Some(&con), Some(&pse), ALPHA, BETA).unwrap();
            (b.l_total, b.grad_labeled, Some(b.grad_weak), Some(b.grad_strong))
        }
    };
    let mut grad = backward_inner(&cl, &gl, false).unwrap().params;
    if let Some(g) = gw {
        grad.axpy(1.0, &backward_inner(&cw, &g, false).unwrap().params).unwrap();
    }
    if let Some(g) = gs {
        grad.axpy(1.0, &backward_inner(&cs, &g, false).unwrap().params).unwrap();
    }
    let (theta_grad, _) = split_gradients(&grad, &fx.sps, &fx.mask).unwrap();
    (value, theta_grad)
}

/// The same objective recomputed from scratch at perturbed parameters.
pub fn value_at(fx: &GradFixture, sps: &ScoredParameterSet, obj: Objective) -> f64 {
    let yl = fx.logits(sps, &fx.labeled);
    let yw = fx.logits(sps, &fx.weak);
    let ys = fx.logits(sps, &fx.strong);
    let lab = labeled_ce(&yl, &fx.labels).unwrap().value;
    let con = contrastive_u(&yw, &ys, 1e-8).unwrap().value;
    let pse = pseudo_label_loss(&yw, &ys, &pseudo_cfg()).unwrap().value;
    match obj {
        Objective::Labeled => lab,
        Objective::Contrastive => con,
        Objective::Pseudo => pse,
        Objective::Combined => lab + ALPHA * con + BETA * pse,
    }
}

/// Largest relative error between the analytic θ-gradient and central
/// differences over every weight and bias. Gradients below 1e-4 are compared
/// absolutely.
pub fn max_relative_error(fx: &GradFixture, obj: Objective) -> f64 {
    let (_, grad) = analytic(fx, obj);
    let flat = grad.flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in flat.iter().enumerate() {
        let mut plus = fx.sps.clone();
        *plus.theta.flat_entry_mut(i) += h;
        let mut minus = fx.sps.clone();
        *minus.theta.flat_entry_mut(i) -= h;
        let numeric = (value_at(fx, &plus, obj) - value_at(fx, &minus, obj)) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}
