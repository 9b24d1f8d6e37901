//! Capacity-controlled joint-VAE objective and its gradients.
//!
//! ```text
//! loss = w_rec · MSE(ξ̂, ξ) + γ |KL_z − C_z| + γ |KL_c − C_c| + w_goal · MSE(x̂_g, x_g)
//! ```
//!
//! The KL terms are per-sample divergences averaged over the batch.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{argmax, log_softmax, sample_gumbel, softmax, AtpModel};
use crate::augmentation::LabeledSample;
use crate::error::{check_dim, AtpError, Result};
use crate::neuralnet::{NetGrads, Parameterized};

/// A batch of training samples as network-ready matrices (one column per sample).
#[derive(Debug, Clone)]
pub struct Batch {
    pub trajectories: DMatrix<f64>,
    pub goals: DMatrix<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&LabeledSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| AtpError::InvalidArgument("empty batch".into()))?;
        let n = first.trajectory.steps() * first.trajectory.dof();
        let wd = first.goal.len();
        let mut trajectories = DMatrix::zeros(n, samples.len());
        let mut goals = DMatrix::zeros(wd, samples.len());
        for (b, s) in samples.iter().enumerate() {
            let flat = s.trajectory.to_flat();
            check_dim("batch trajectory", n, flat.len())?;
            check_dim("batch goal", wd, s.goal.len())?;
            trajectories.column_mut(b).copy_from_slice(&flat);
            goals.column_mut(b).copy_from_slice(&s.goal);
        }
        Ok(Self { trajectories, goals })
    }

    pub fn len(&self) -> usize {
        self.trajectories.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reparametrization noise for one batch, frozen so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct Noise {
    /// `k_z × batch` standard normal draws.
    pub gaussian: DMatrix<f64>,
    /// `k_c × batch` Gumbel(0, 1) draws.
    pub gumbel: DMatrix<f64>,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(k_z: usize, k_c: usize, batch: usize, rng: &mut R) -> Self {
        let gaussian = DMatrix::from_fn(k_z, batch, |_, _| rng.sample(StandardNormal));
        let gumbel = DMatrix::from_fn(k_c, batch, |_, _| sample_gumbel(rng));
        Self { gaussian, gumbel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub gamma: f64,
    pub capacity_z: f64,
    pub capacity_c: f64,
    pub temperature: f64,
    pub recon_weight: f64,
    pub goal_weight: f64,
    /// Straight-through one-hot codes in the forward pass.
    pub hard: bool,
}

/// Value of every loss term for one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_mse: f64,
    pub goal_mse: f64,
    pub recon_term: f64,
    pub goal_term: f64,
    pub kl_z: f64,
    pub kl_z_per_unit: Vec<f64>,
    pub kl_c: f64,
    pub capacity_z: f64,
    pub capacity_c: f64,
    pub capacity_penalty_z: f64,
    pub capacity_penalty_c: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loss={:.6} recon_mse={:.6} goal_mse={:.6} kl_z={:.4} (C={:.3}) kl_c={:.4} (C={:.3})",
            self.total, self.recon_mse, self.goal_mse, self.kl_z, self.capacity_z, self.kl_c, self.capacity_c
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: NetGrads,
    pub decoder: NetGrads,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.encoder.slices();
        s.extend(self.decoder.slices());
        s
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl AtpModel {
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.encoder.param_slices_mut();
        s.extend(self.decoder.param_slices_mut());
        s
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut s = self.encoder.param_slices();
        s.extend(self.decoder.param_slices());
        s
    }
}

impl Parameterized for AtpModel {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    fn param(&self, index: usize) -> f64 {
        let n = self.encoder.num_params();
        if index < n {
            self.encoder.param(index)
        } else {
            self.decoder.param(index - n)
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let n = self.encoder.num_params();
        if index < n {
            self.encoder.set_param(index, value)
        } else {
            self.decoder.set_param(index - n, value)
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn forward_backward(
    model: &AtpModel,
    batch: &Batch,
    settings: &LossSettings,
    noise: &Noise,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<ModelGrads>)> {
    let d = model.dims;
    let (kz, kc, wd) = (d.k_z, d.k_c, d.workspace_dim);
    let bsz = batch.len();
    if bsz == 0 {
        return Err(AtpError::InvalidArgument("empty batch".into()));
    }
    if !(settings.temperature > 0.0) {
        return Err(AtpError::InvalidArgument("temperature must be > 0".into()));
    }
    check_dim("batch trajectory", d.trajectory_len(), batch.trajectories.nrows())?;
    check_dim("batch goal", wd, batch.goals.nrows())?;
    check_dim("gaussian noise", kz, noise.gaussian.nrows())?;
    check_dim("gumbel noise", kc, noise.gumbel.nrows())?;
    check_dim("noise batch", bsz, noise.gaussian.ncols())?;
    check_dim("noise batch", bsz, noise.gumbel.ncols())?;

    let enc_tape = model.encoder.forward_batch(&batch.trajectories)?;
    let head = enc_tape.output();
    let inv_b = 1.0 / bsz as f64;

    let mut dec_in = DMatrix::zeros(d.decoder_input(), bsz);
    let mut soft_codes = DMatrix::zeros(kc, bsz);
    let mut q_log = DMatrix::zeros(kc, bsz);
    let mut kl_z_per_unit = vec![0.0; kz];
    let mut kl_c = 0.0;
    let mut goal_sq = 0.0;
    for b in 0..bsz {
        let col = head.column(b);
        for i in 0..kz {
            let (mu, s) = (col[i], col[kz + i]);
            let sigma = s.exp();
            dec_in[(i, b)] = mu + sigma * noise.gaussian[(i, b)];
            kl_z_per_unit[i] += 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * s) * inv_b;
        }
        let logits: Vec<f64> = (0..kc).map(|k| col[2 * kz + k]).collect();
        let lp = log_softmax(&logits);
        kl_c += ((kc as f64).ln() + lp.iter().map(|l| l.exp() * l).sum::<f64>()) * inv_b;
        let relaxed: Vec<f64> = (0..kc)
            .map(|k| (logits[k] + noise.gumbel[(k, b)]) / settings.temperature)
            .collect();
        let soft = softmax(&relaxed);
        let hard_index = argmax(&soft);
        for k in 0..kc {
            q_log[(k, b)] = lp[k];
            soft_codes[(k, b)] = soft[k];
            dec_in[(kz + k, b)] = if settings.hard {
                if k == hard_index {
                    1.0
                } else {
                    0.0
                }
            } else {
                soft[k]
            };
        }
        for g in 0..wd {
            dec_in[(kz + kc + g, b)] = batch.goals[(g, b)];
            goal_sq += (col[2 * kz + kc + g] - batch.goals[(g, b)]).powi(2);
        }
    }
    let kl_z: f64 = kl_z_per_unit.iter().sum();

    let dec_tape = model.decoder.forward_batch(&dec_in)?;
    let out = dec_tape.output();
    let n_rec = (out.len()) as f64;
    let recon_sq: f64 = out
        .iter()
        .zip(batch.trajectories.iter())
        .map(|(o, x)| (PI * o - x).powi(2))
        .sum();
    let recon_mse = recon_sq / n_rec;
    let goal_mse = goal_sq / (wd * bsz) as f64;
    let recon_term = settings.recon_weight * recon_mse;
    let goal_term = settings.goal_weight * goal_mse;
    let capacity_penalty_z = settings.gamma * (kl_z - settings.capacity_z).abs();
    let capacity_penalty_c = settings.gamma * (kl_c - settings.capacity_c).abs();
    let breakdown = LossBreakdown {
        total: recon_term + goal_term + capacity_penalty_z + capacity_penalty_c,
        recon_mse,
        goal_mse,
        recon_term,
        goal_term,
        kl_z,
        kl_z_per_unit,
        kl_c,
        capacity_z: settings.capacity_z,
        capacity_c: settings.capacity_c,
        capacity_penalty_z,
        capacity_penalty_c,
    };
    if !breakdown.is_finite() {
        return Err(AtpError::NonFinite("loss"));
    }
    if !with_grads {
        return Ok((breakdown, None));
    }

    // decoder: d/dO of w_rec·Σ(πO − ξ)²/n
    let scale = settings.recon_weight * 2.0 * PI / n_rec;
    let mut d_out = out.clone();
    for (g, x) in d_out.iter_mut().zip(batch.trajectories.iter()) {
        *g = scale * (PI * *g - x);
    }
    let (dec_grads, d_dec_in) = model.decoder.backward(&dec_tape, &d_out)?;

    let coef_z = settings.gamma * sign(kl_z - settings.capacity_z) * inv_b;
    let coef_c = settings.gamma * sign(kl_c - settings.capacity_c) * inv_b;
    let goal_scale = settings.goal_weight * 2.0 / (wd * bsz) as f64;
    let mut d_head = DMatrix::zeros(d.encoder_output(), bsz);
    for b in 0..bsz {
        let col = head.column(b);
        for i in 0..kz {
            let (mu, s) = (col[i], col[kz + i]);
            let sigma = s.exp();
            let dz = d_dec_in[(i, b)];
            d_head[(i, b)] = dz + coef_z * mu;
            d_head[(kz + i, b)] = dz * sigma * noise.gaussian[(i, b)] + coef_z * (sigma * sigma - 1.0);
        }
        // relaxed sample: straight-through uses the soft Jacobian
        let dot: f64 = (0..kc).map(|k| soft_codes[(k, b)] * d_dec_in[(kz + k, b)]).sum();
        let ent: f64 = (0..kc).map(|k| q_log[(k, b)].exp() * q_log[(k, b)]).sum();
        for k in 0..kc {
            let p_soft = soft_codes[(k, b)];
            let relax = p_soft * (d_dec_in[(kz + k, b)] - dot) / settings.temperature;
            let lq = q_log[(k, b)];
            let kl = coef_c * lq.exp() * (lq - ent);
            d_head[(2 * kz + k, b)] = relax + kl;
        }
        for g in 0..wd {
            d_head[(2 * kz + kc + g, b)] = goal_scale * (col[2 * kz + kc + g] - batch.goals[(g, b)]);
        }
    }
    let (enc_grads, _) = model.encoder.backward(&enc_tape, &d_head)?;
    Ok((
        breakdown,
        Some(ModelGrads {
            encoder: enc_grads,
            decoder: dec_grads,
        }),
    ))
}

/// Loss and parameter gradients under frozen noise.
pub fn evaluate_loss(
    model: &AtpModel,
    batch: &Batch,
    settings: &LossSettings,
    noise: &Noise,
) -> Result<(LossBreakdown, ModelGrads)> {
    let (breakdown, grads) = forward_backward(model, batch, settings, noise, true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

/// Loss value only, under frozen noise.
pub fn loss_value(model: &AtpModel, batch: &Batch, settings: &LossSettings, noise: &Noise) -> Result<LossBreakdown> {
    Ok(forward_backward(model, batch, settings, noise, false)?.0)
}

/// Loss and gradients with freshly sampled reparametrization noise.
pub fn atp_loss<R: Rng + ?Sized>(
    model: &AtpModel,
    batch: &Batch,
    settings: &LossSettings,
    rng: &mut R,
) -> Result<(LossBreakdown, ModelGrads)> {
    let noise = Noise::sample(model.dims.k_z, model.dims.k_c, batch.len(), rng);
    evaluate_loss(model, batch, settings, &noise)
}
