use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{atp_loss, Batch, LossBreakdown, LossSettings};
use super::AtpModel;
use crate::augmentation::LabeledSample;
use crate::error::{check_dim, AtpError, Result};
use crate::neuralnet::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Final continuous capacity `C_z` (nats).
    pub capacity_z_max: f64,
    /// Final discrete capacity `C_c`; `None` means `ln k_c`.
    pub capacity_c_max: Option<f64>,
    /// Fraction of all optimizer steps over which capacities ramp up from 0.
    pub ramp_fraction: f64,
    pub temperature: f64,
    /// `None` means `steps · dof`, i.e. a per-sample sum of squared errors.
    pub recon_weight: Option<f64>,
    pub goal_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 100,
            gamma: 30.0,
            capacity_z_max: 5.0,
            capacity_c_max: None,
            ramp_fraction: 0.6,
            temperature: 0.67,
            recon_weight: None,
            goal_weight: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(AtpError::InvalidArgument(msg.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.capacity_z_max >= 0.0) || self.capacity_c_max.is_some_and(|c| !(c >= 0.0)) {
            return bad("capacities must be >= 0");
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad("ramp fraction must be in (0, 1]");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Capacities `(C_z, C_c)` after `step` of `total_steps` optimizer steps.
    pub fn capacities(&self, step: usize, total_steps: usize, k_c: usize) -> (f64, f64) {
        let ramp_steps = self.ramp_fraction * total_steps as f64;
        let progress = (step as f64 / ramp_steps).min(1.0);
        let cc = self.capacity_c_max.unwrap_or((k_c as f64).ln());
        (progress * self.capacity_z_max, progress * cc)
    }
}

/// Batch-size-weighted averages over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub recon_mse: f64,
    pub goal_mse: f64,
    pub kl_c: f64,
    pub kl_z: f64,
    pub kl_z_per_unit: Vec<f64>,
    pub capacity_z: f64,
    pub capacity_c: f64,
}

struct Accumulator {
    count: usize,
    loss: f64,
    recon: f64,
    goal: f64,
    kl_c: f64,
    kl_z: Vec<f64>,
    last: LossBreakdown,
}

impl Accumulator {
    fn new(k_z: usize) -> Self {
        Self {
            count: 0,
            loss: 0.0,
            recon: 0.0,
            goal: 0.0,
            kl_c: 0.0,
            kl_z: vec![0.0; k_z],
            last: LossBreakdown::default(),
        }
    }

    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.count += n;
        self.loss += w * b.total;
        self.recon += w * b.recon_mse;
        self.goal += w * b.goal_mse;
        self.kl_c += w * b.kl_c;
        for (acc, v) in self.kl_z.iter_mut().zip(&b.kl_z_per_unit) {
            *acc += w * v;
        }
        self.last = b.clone();
    }

    fn finish(self, epoch: usize) -> EpochMetrics {
        let n = self.count as f64;
        let kl_z_per_unit: Vec<f64> = self.kl_z.iter().map(|v| v / n).collect();
        EpochMetrics {
            epoch,
            loss: self.loss / n,
            recon_mse: self.recon / n,
            goal_mse: self.goal / n,
            kl_c: self.kl_c / n,
            kl_z: kl_z_per_unit.iter().sum(),
            kl_z_per_unit,
            capacity_z: self.last.capacity_z,
            capacity_c: self.last.capacity_c,
        }
    }
}

/// Minimize the ATP objective with Adam over shuffled mini-batches.
///
/// Deterministic given `cfg.seed`. A non-finite loss or gradient aborts with
/// [`AtpError::Diverged`]; the model passed in is left at its state after the
/// last completed epoch.
pub fn train(model: &mut AtpModel, dataset: &[LabeledSample], cfg: &TrainingConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(AtpError::InvalidArgument("dataset is empty".into()));
    }
    let dims = model.dims;
    for s in dataset {
        check_dim("sample steps", dims.steps, s.trajectory.steps())?;
        check_dim("sample dof", dims.dof, s.trajectory.dof())?;
        check_dim("sample goal", dims.workspace_dim, s.goal.len())?;
    }
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::new(cfg.adam.clone(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let recon_weight = cfg.recon_weight.unwrap_or(dims.trajectory_len() as f64);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = model.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = Accumulator::new(dims.k_z);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&LabeledSample> = chunk.iter().map(|i| &dataset[*i]).collect();
            let batch = Batch::from_samples(&samples)?;
            let (capacity_z, capacity_c) = cfg.capacities(step, total_steps, dims.k_c);
            let settings = LossSettings {
                gamma: cfg.gamma,
                capacity_z,
                capacity_c,
                temperature: cfg.temperature,
                recon_weight,
                goal_weight: cfg.goal_weight,
                hard: false,
            };
            let result = atp_loss(model, &batch, &settings, &mut rng).and_then(|(breakdown, grads)| {
                let mut params = model.param_slices_mut();
                adam.step(&mut params, &grads.slices())?;
                Ok(breakdown)
            });
            let breakdown = match result {
                Ok(b) => b,
                Err(AtpError::NonFinite(what)) => {
                    *model = checkpoint;
                    debug!("non-finite {what} at step {step}");
                    return Err(AtpError::Diverged {
                        epoch,
                        breakdown: acc.last,
                    });
                }
                Err(e) => return Err(e),
            };
            acc.add(&breakdown, chunk.len());
            step += 1;
        }
        let m = acc.finish(epoch);
        if epoch % 25 == 0 || epoch + 1 == cfg.epochs {
            info!(
                "epoch {epoch}: loss {:.4} recon {:.5} goal {:.6} kl_c {:.3} kl_z {:.3} {:?}",
                m.loss, m.recon_mse, m.goal_mse, m.kl_c, m.kl_z, m.kl_z_per_unit
            );
        }
        metrics.push(m);
        checkpoint = model.clone();
    }
    model.meta.config_fingerprint = Some(cfg.fingerprint());
    model.meta.per_unit_kl = metrics.last().map(|m| m.kl_z_per_unit.clone());
    Ok(metrics)
}

/// Per-epoch CSV: `epoch,loss,recon_mse,goal_mse,kl_c,kl_z,kl_z0..,capacity_z,capacity_c`.
pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let k_z = metrics.first().map_or(0, |m| m.kl_z_per_unit.len());
    let mut header = String::from("epoch,loss,recon_mse,goal_mse,kl_c,kl_z");
    for i in 0..k_z {
        header.push_str(&format!(",kl_z{i}"));
    }
    header.push_str(",capacity_z,capacity_c\n");
    out.write_all(header.as_bytes())?;
    for m in metrics {
        let mut line = format!(
            "{},{},{},{},{},{}",
            m.epoch, m.loss, m.recon_mse, m.goal_mse, m.kl_c, m.kl_z
        );
        for v in &m.kl_z_per_unit {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(",{},{}\n", m.capacity_z, m.capacity_c));
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atpmodel::ModelConfig;
    use crate::augmentation::{build_dataset, generate_demos, AugmentationConfig};
    use crate::kinematics::KinematicChain;
    use crate::trajectory::SmoothnessOperator;

    fn small_setup(n: usize) -> (AtpModel, Vec<LabeledSample>) {
        let chain = KinematicChain::default_planar();
        let demos = generate_demos(&chain, 9, 2, 2, 7).unwrap();
        let op = SmoothnessOperator::new(9).unwrap();
        let cfg = AugmentationConfig {
            n_samples: n,
            perturbation_scale: 1e-3,
            ..AugmentationConfig::with_defaults(3)
        };
        let data = build_dataset(&chain, &op, &demos, &cfg).unwrap().samples;
        let model_cfg = ModelConfig {
            encoder_hidden: vec![32, 16],
            decoder_hidden: vec![16, 32],
            ..ModelConfig::default()
        };
        (AtpModel::new(&chain, 10, &model_cfg).unwrap(), data)
    }

    #[test]
    fn one_epoch_logs_one_entry() {
        let (mut model, data) = small_setup(10);
        let cfg = TrainingConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let metrics = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(metrics.len(), 1);
        assert_eq!(metrics[0].kl_z_per_unit.len(), 5);
        assert_eq!(model.meta.config_fingerprint.as_deref(), Some(cfg.fingerprint().as_str()));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (model, data) = small_setup(200);
        let cfg = TrainingConfig {
            epochs: 30,
            batch_size: 20,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            ..TrainingConfig::default()
        };
        let mut a = model.clone();
        let mut b = model.clone();
        let ma = train(&mut a, &data, &cfg).unwrap();
        let mb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        assert!(ma.last().unwrap().recon_mse < 0.5 * ma[0].recon_mse);
    }

    #[test]
    fn capacity_schedule_ramps_then_holds() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.capacities(0, 100, 4), (0.0, 0.0));
        let (cz, cc) = cfg.capacities(30, 100, 4);
        assert!((cz - 2.5).abs() < 1e-12 && (cc - 0.5 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(cfg.capacities(60, 100, 4), (5.0, 4f64.ln()));
        assert_eq!(cfg.capacities(99, 100, 4), (5.0, 4f64.ln()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut model, data) = small_setup(4);
        assert!(train(&mut model, &[], &TrainingConfig::default()).is_err());
        let cfg = TrainingConfig {
            temperature: 0.0,
            ..TrainingConfig::default()
        };
        assert!(train(&mut model, &data, &cfg).is_err());
    }

    #[test]
    fn metrics_csv_shape() {
        let (mut model, data) = small_setup(10);
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 5,
            ..TrainingConfig::default()
        };
        let metrics = train(&mut model, &data, &cfg).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("epoch,loss,recon_mse,goal_mse,kl_c,kl_z,kl_z0"));
        assert_eq!(lines[1].split(',').count(), 13);
    }

    #[test]
    fn divergence_restores_checkpoint() {
        let (mut model, data) = small_setup(20);
        let before = model.clone();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 5,
            adam: AdamConfig {
                lr: f64::INFINITY,
                ..AdamConfig::default()
            },
            ..TrainingConfig::default()
        };
        let err = train(&mut model, &data, &cfg).unwrap_err();
        assert!(matches!(err, AtpError::Diverged { epoch: 0, .. }), "{err}");
        assert_eq!(model, before);
    }
}
