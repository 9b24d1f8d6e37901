//! Goal-conditioned joint VAE over trajectories.
//!
//! The encoder maps a flattened trajectory to the Gaussian posterior of the
//! continuous code `z`, logits of the categorical code `c`, and a goal
//! prediction. The decoder maps `(z, c, x_g)` back to a trajectory through
//! a `π·tanh` output, so every decoded joint angle lies in `[-π, π]`.

mod io;
mod loss;
mod train;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AtpError, Result};
use crate::kinematics::KinematicChain;
use crate::neuralnet::{Activation, DenseNet};
use crate::trajectory::Trajectory;

pub use io::{load_model, load_model_for_chain, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use loss::{atp_loss, evaluate_loss, loss_value, Batch, LossBreakdown, LossSettings, ModelGrads, Noise};
pub use train::{train, write_metrics_csv, EpochMetrics, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dof: usize,
    /// Rows per trajectory, `T + 1`.
    pub steps: usize,
    pub k_z: usize,
    pub k_c: usize,
    pub workspace_dim: usize,
}

impl ModelDims {
    pub fn trajectory_len(&self) -> usize {
        self.steps * self.dof
    }

    /// Encoder head: `μ`, `log σ`, categorical logits, goal prediction.
    pub fn encoder_output(&self) -> usize {
        2 * self.k_z + self.k_c + self.workspace_dim
    }

    pub fn decoder_input(&self) -> usize {
        self.k_z + self.k_c + self.workspace_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k_z: usize,
    pub k_c: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_z: 5,
            k_c: 4,
            encoder_hidden: vec![300, 200],
            decoder_hidden: vec![200, 300],
            seed: 0,
        }
    }
}

/// Continuous and categorical latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub c: Vec<f64>,
}

impl LatentCode {
    pub fn hard_class(&self) -> usize {
        argmax(&self.c)
    }
}

/// Deterministic encoder outputs for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub logits: Vec<f64>,
    pub goal: Vec<f64>,
}

/// Values carried alongside the weights in a model file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_fingerprint: Option<String>,
    /// Final-epoch KL of each continuous unit.
    pub per_unit_kl: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtpModel {
    pub(crate) dims: ModelDims,
    pub(crate) chain: KinematicChain,
    pub(crate) encoder: DenseNet,
    pub(crate) decoder: DenseNet,
    pub meta: ModelMeta,
}

impl AtpModel {
    pub fn new(chain: &KinematicChain, steps: usize, config: &ModelConfig) -> Result<Self> {
        if steps < Trajectory::MIN_STEPS {
            return Err(AtpError::InvalidArgument(format!("steps must be >= 3, got {steps}")));
        }
        if config.k_z == 0 || config.k_c == 0 {
            return Err(AtpError::InvalidArgument("latent dimensions must be >= 1".into()));
        }
        let dims = ModelDims {
            dof: chain.dof(),
            steps,
            k_z: config.k_z,
            k_c: config.k_c,
            workspace_dim: chain.workspace_dim(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut enc_sizes = vec![dims.trajectory_len()];
        enc_sizes.extend(&config.encoder_hidden);
        enc_sizes.push(dims.encoder_output());
        let mut enc_acts = vec![Activation::Relu; config.encoder_hidden.len()];
        enc_acts.push(Activation::Identity);
        let mut dec_sizes = vec![dims.decoder_input()];
        dec_sizes.extend(&config.decoder_hidden);
        dec_sizes.push(dims.trajectory_len());
        let mut dec_acts = vec![Activation::Relu; config.decoder_hidden.len()];
        dec_acts.push(Activation::Tanh);
        Ok(Self {
            dims,
            chain: chain.clone(),
            encoder: DenseNet::new(&enc_sizes, &enc_acts, &mut rng)?,
            decoder: DenseNet::new(&dec_sizes, &dec_acts, &mut rng)?,
            meta: ModelMeta::default(),
        })
    }

    pub(crate) fn from_parts(
        dims: ModelDims,
        chain: KinematicChain,
        encoder: DenseNet,
        decoder: DenseNet,
        meta: ModelMeta,
    ) -> Result<Self> {
        check_dim("chain dof", dims.dof, chain.dof())?;
        check_dim("chain workspace", dims.workspace_dim, chain.workspace_dim())?;
        check_dim("encoder input", dims.trajectory_len(), encoder.input_dim())?;
        check_dim("encoder output", dims.encoder_output(), encoder.output_dim())?;
        check_dim("decoder input", dims.decoder_input(), decoder.input_dim())?;
        check_dim("decoder output", dims.trajectory_len(), decoder.output_dim())?;
        if decoder.layers().last().map(|l| l.activation) != Some(Activation::Tanh) {
            return Err(AtpError::Format("decoder output layer must use tanh".into()));
        }
        Ok(Self {
            dims,
            chain,
            encoder,
            decoder,
            meta,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        check_dim("trajectory steps", self.dims.steps, traj.steps())?;
        check_dim("trajectory dof", self.dims.dof, traj.dof())
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<Encoding> {
        self.check_trajectory(traj)?;
        let flat = traj.to_flat();
        let head = self.encoder.predict(&DMatrix::from_column_slice(flat.len(), 1, &flat))?;
        Ok(split_head(&self.dims, head.as_slice()))
    }

    /// Encode with the posterior mean and the argmax class.
    pub fn infer_code(&self, traj: &Trajectory) -> Result<(LatentCode, Vec<f64>)> {
        let enc = self.encode(traj)?;
        let c = one_hot(self.dims.k_c, argmax(&enc.logits));
        Ok((LatentCode { z: enc.mu, c }, enc.goal))
    }

    pub fn decode(&self, z: &[f64], c: &[f64], goal: &[f64]) -> Result<Trajectory> {
        let out = self.decode_batch(&[(z, c, goal)])?;
        Ok(out.into_iter().next().expect("one decoded trajectory"))
    }

    pub fn decode_batch(&self, codes: &[(&[f64], &[f64], &[f64])]) -> Result<Vec<Trajectory>> {
        let d = self.dims;
        let mut input = DMatrix::zeros(d.decoder_input(), codes.len());
        for (b, (z, c, goal)) in codes.iter().enumerate() {
            check_dim("z", d.k_z, z.len())?;
            check_dim("c", d.k_c, c.len())?;
            check_dim("goal", d.workspace_dim, goal.len())?;
            let sum: f64 = c.iter().sum();
            if c.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(AtpError::InvalidArgument(format!(
                    "discrete code must be a probability vector, got {c:?}"
                )));
            }
            for (i, v) in z.iter().chain(c.iter()).chain(goal.iter()).enumerate() {
                input[(i, b)] = *v;
            }
        }
        let out = self.decoder.predict(&input)?;
        out.column_iter()
            .map(|col| {
                let flat: Vec<f64> = col.iter().map(|v| (PI * v).clamp(-PI, PI)).collect();
                Trajectory::from_flat(d.steps, d.dof, &flat)
            })
            .collect()
    }
}

pub(crate) fn split_head(dims: &ModelDims, head: &[f64]) -> Encoding {
    let (kz, kc) = (dims.k_z, dims.k_c);
    Encoding {
        mu: head[..kz].to_vec(),
        sigma: head[kz..2 * kz].iter().map(|s| s.exp()).collect(),
        logits: head[2 * kz..2 * kz + kc].to_vec(),
        goal: head[2 * kz + kc..].to_vec(),
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(k: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize_gaussian<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], rng: &mut R) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Relaxed categorical sample `softmax((logits + g) / τ)` with `g` i.i.d. Gumbel(0, 1).
///
/// With `hard`, returns the one-hot argmax of the relaxed sample (the
/// straight-through forward value).
pub fn reparameterize_gumbel<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R, hard: bool) -> Vec<f64> {
    let noise: Vec<f64> = (0..logits.len()).map(|_| sample_gumbel(rng)).collect();
    gumbel_softmax_with_noise(logits, &noise, temperature, hard)
}

pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], temperature: f64, hard: bool) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    let soft = softmax(&scaled);
    if hard {
        one_hot(soft.len(), argmax(&soft))
    } else {
        soft
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKl {
    pub per_unit: Vec<f64>,
    pub total: f64,
}

/// KL of `N(μ, diag σ²)` from the standard normal prior.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> GaussianKl {
    let per_unit: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .collect();
    let total = per_unit.iter().sum();
    GaussianKl { per_unit, total }
}

/// KL of a categorical distribution from the uniform prior, with `0 ln 0 = 0`.
pub fn kl_categorical(probs: &[f64]) -> f64 {
    let k = probs.len() as f64;
    k.ln() + probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}
