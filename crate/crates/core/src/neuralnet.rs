//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Batches are column-major `features × batch` matrices: each column is one
//! sample.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AtpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `c = op(a) · op(b)` through `matrixmultiply`, transposing by stride.
pub(crate) fn matmul(a: &DMatrix<f64>, trans_a: bool, b: &DMatrix<f64>, trans_b: bool) -> DMatrix<f64> {
    let (m, k) = if trans_a { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (kb, n) = if trans_b { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert_eq!(k, kb, "matmul inner dimensions");
    let mut c = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (a.nrows() as isize, 1) } else { (1, a.nrows() as isize) };
    let (rsb, csb) = if trans_b { (b.nrows() as isize, 1) } else { (1, b.nrows() as isize) };
    // SAFETY: strides describe the column-major storage of `a`, `b` and `c`
    // under the requested transposition, and all three buffers are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: DVector::zeros(fan_out),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = matmul(&self.weight, false, x, false);
        for mut col in y.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(self.bias.iter()) {
                *v = self.activation.apply(*v + b);
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Activations saved by [`DenseNet::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.values.last().expect("tape holds the input at least")
    }
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl NetGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AtpError::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for layer in &layers {
            check_dim("bias length", layer.output_dim(), layer.bias.len())?;
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(AtpError::NonFinite("network parameters"));
            }
        }
        Ok(Self { layers })
    }

    /// `sizes` lists every width from input to output; `activations` has one entry per layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(AtpError::InvalidArgument("need input and output sizes".into()));
        }
        check_dim("activations", sizes.len() - 1, activations.len())?;
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, act)| DenseLayer::init(w[0], w[1], *act, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        check_dim("network input", self.input_dim(), x.nrows())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AtpError::NonFinite("network input"));
        }
        Ok(())
    }

    /// Forward pass over a batch, keeping what backward needs.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(values.last().unwrap());
            values.push(next);
        }
        Ok(Tape { values })
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let tape = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok((tape.output().as_slice().to_vec(), tape))
    }

    /// Reverse pass: gradients of `Σ out_grad ⊙ output` w.r.t. parameters and input.
    pub fn backward(&self, tape: &Tape, out_grad: &DMatrix<f64>) -> Result<(NetGrads, DMatrix<f64>)> {
        check_dim("tape length", self.layers.len() + 1, tape.values.len())?;
        let out = tape.output();
        check_dim("output gradient rows", out.nrows(), out_grad.nrows())?;
        check_dim("output gradient cols", out.ncols(), out_grad.ncols())?;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut grad = out_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &tape.values[i + 1];
            for (g, v) in grad.iter_mut().zip(y.iter()) {
                *g *= layer.activation.derivative_from_output(*v);
            }
            let input = &tape.values[i];
            weights.push(matmul(&grad, false, input, true));
            biases.push(DVector::from_iterator(grad.nrows(), grad.row_iter().map(|r| r.sum())));
            grad = matmul(&layer.weight, true, &grad, false);
        }
        weights.reverse();
        biases.reverse();
        Ok((NetGrads { weights, biases }, grad))
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            weights: self.layers.iter().map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
            biases: self.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Parameter tensors in `w0, b0, w1, b1, …` order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

/// Flat access to every trainable scalar, used by [`gradcheck`].
pub trait Parameterized {
    fn num_params(&self) -> usize;
    fn param(&self, index: usize) -> f64;
    fn set_param(&mut self, index: usize, value: f64);
}

fn locate(slices: &[&[f64]], mut index: usize) -> (usize, usize) {
    for (t, s) in slices.iter().enumerate() {
        if index < s.len() {
            return (t, index);
        }
        index -= s.len();
    }
    panic!("parameter index out of range");
}

impl Parameterized for DenseNet {
    fn num_params(&self) -> usize {
        DenseNet::num_params(self)
    }

    fn param(&self, index: usize) -> f64 {
        let slices = self.param_slices();
        let (t, i) = locate(&slices, index);
        slices[t][i]
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let (t, i) = locate(&self.param_slices(), index);
        self.param_slices_mut()[t][i] = value;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            second: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_dim("adam tensors", self.first.len(), params.len())?;
        check_dim("adam gradients", self.first.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            check_dim("adam tensor size", m.len(), p.len())?;
            check_dim("adam gradient size", m.len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AtpError::NonFinite("gradient"));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

/// Compare `analytic` against central finite differences of `loss` on a
/// random subset of `count` parameters (all of them when `count` is larger).
pub fn gradcheck<M, F, R>(
    model: &mut M,
    loss: F,
    analytic: &[f64],
    count: usize,
    step: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradcheckReport>
where
    M: Parameterized,
    F: Fn(&M) -> f64,
    R: Rng + ?Sized,
{
    let n = model.num_params();
    check_dim("analytic gradient", n, analytic.len())?;
    let indices: Vec<usize> = if count >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, count).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for &i in &indices {
        let orig = model.param(i);
        model.set_param(i, orig + step);
        let up = loss(model);
        model.set_param(i, orig - step);
        let down = loss(model);
        model.set_param(i, orig);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if !(rel <= max_rel_error) {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradcheckReport {
        checked: indices.len(),
        max_rel_error,
        worst_index,
        passed: max_rel_error < tolerance,
    })
}
