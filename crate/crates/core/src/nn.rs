//! Dense rectifier network with exact reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Layer widths from input to output. Hidden layers use a rectifier, the
/// output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "an architecture needs at least 2 widths, got {}",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(MlpArchitecture { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l], self.widths[l + 1])
    }

    pub fn num_weights(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.widths[l] * self.widths[l + 1])
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + self.widths[1..].iter().sum::<usize>()
    }
}

/// Weights (stored `fan_in x fan_out`) and biases of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Vec<f64>>,
}

impl ParameterSet {
    pub fn zeros(arch: &MlpArchitecture) -> Self {
        let weights = (0..arch.num_layers())
            .map(|l| {
                let (i, o) = arch.layer_shape(l);
                Tensor2::zeros(i, o)
            })
            .collect();
        let biases = arch.widths()[1..].iter().map(|&o| vec![0.0; o]).collect();
        ParameterSet { weights, biases }
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: &MlpArchitecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for w in &mut p.weights {
            let bound = (6.0 / w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor2::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn matches(&self, arch: &MlpArchitecture) -> bool {
        self.weights.len() == arch.num_layers()
            && self.biases.len() == arch.num_layers()
            && (0..arch.num_layers()).all(|l| {
                let (i, o) = arch.layer_shape(l);
                self.weights[l].rows() == i && self.weights[l].cols() == o && self.biases[l].len() == o
            })
    }

    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.same_shape(b))
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Tensor2::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// `self += k · other`.
    pub fn axpy(&mut self, k: f64, other: &ParameterSet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("parameter sets differ in shape".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(k, b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
        Ok(())
    }

    /// Flat view in layer order: weights of layer 0, bias of layer 0, ...
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    /// Mutable reference to the `i`-th entry of [`ParameterSet::flat`].
    pub fn flat_entry_mut(&mut self, mut i: usize) -> &mut f64 {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return &mut w.data_mut()[i];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("flat index out of range");
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Weights actually used by each layer (already masked, if any).
    weights: Vec<Tensor2>,
    /// Input to each layer.
    inputs: Vec<Tensor2>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Tensor2>,
    out_rows: usize,
    out_cols: usize,
}

impl ForwardCache {
    pub fn batch_rows(&self) -> usize {
        self.out_rows
    }
}

/// Gradients from [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParameterSet,
    pub input: Option<Tensor2>,
}

pub fn forward(
    params: &ParameterSet,
    arch: &MlpArchitecture,
    batch: &Tensor2,
) -> Result<(Tensor2, ForwardCache)> {
    if !params.matches(arch) {
        return Err(Error::Dimension("parameters do not match architecture".into()));
    }
    forward_effective(arch, params.weights.clone(), &params.biases, batch)
}

/// Forward pass with explicitly supplied (possibly masked) weights.
pub fn forward_effective(
    arch: &MlpArchitecture,
    weights: Vec<Tensor2>,
    biases: &[Vec<f64>],
    batch: &Tensor2,
) -> Result<(Tensor2, ForwardCache)> {
    if batch.cols() != arch.input_width() {
        return Err(Error::Dimension(format!(
            "batch has {} columns, network expects {}",
            batch.cols(),
            arch.input_width()
        )));
    }
    if weights.len() != arch.num_layers() || biases.len() != arch.num_layers() {
        return Err(Error::Dimension("layer count mismatch".into()));
    }
    let last = arch.num_layers() - 1;
    let mut inputs = Vec::with_capacity(arch.num_layers());
    let mut pre = Vec::with_capacity(last);
    let mut x = batch.clone();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut z = x.matmul(w)?;
        if b.len() != z.cols() {
            return Err(Error::Dimension(format!("bias {l} has wrong length")));
        }
        z.add_row_vector(b);
        inputs.push(x);
        if l == last {
            x = z;
        } else {
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            x = a;
        }
    }
    let cache = ForwardCache {
        weights,
        inputs,
        pre,
        out_rows: x.rows(),
        out_cols: x.cols(),
    };
    Ok((x, cache))
}

/// Gradients of a scalar loss given its gradient with respect to the logits.
pub fn backward(cache: &ForwardCache, upstream: &Tensor2) -> Result<(ParameterSet, Tensor2)> {
    let g = backward_inner(cache, upstream, true)?;
    Ok((g.params, g.input.expect("input gradient requested")))
}

/// Like [`backward`] but optionally skips the input gradient.
pub fn backward_inner(
    cache: &ForwardCache,
    upstream: &Tensor2,
    want_input: bool,
) -> Result<Gradients> {
    if upstream.rows() != cache.out_rows || upstream.cols() != cache.out_cols {
        return Err(Error::Usage(format!(
            "upstream gradient is {}x{} but the cached forward produced {}x{}",
            upstream.rows(),
            upstream.cols(),
            cache.out_rows,
            cache.out_cols
        )));
    }
    let layers = cache.weights.len();
    let mut w_grads = vec![Tensor2::zeros(0, 0); layers];
    let mut b_grads = vec![Vec::new(); layers];
    let mut delta = upstream.clone();
    let mut input_grad = None;
    for l in (0..layers).rev() {
        w_grads[l] = cache.inputs[l].matmul_tn(&delta)?;
        b_grads[l] = delta.sum_rows();
        if l > 0 || want_input {
            let mut dx = delta.matmul_nt(&cache.weights[l])?;
            if l > 0 {
                for (d, z) in dx.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = dx;
            } else {
                input_grad = Some(dx);
            }
        }
    }
    Ok(Gradients {
        params: ParameterSet {
            weights: w_grads,
            biases: b_grads,
        },
        input: input_grad,
    })
}
