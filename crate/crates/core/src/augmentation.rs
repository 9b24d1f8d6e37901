//! Scripted demonstrations and dataset synthesis around them.
//!
//! Each synthetic sample is `ξ = Δξ_g + ξ_β`: a goal shift spread over the
//! trajectory by the start-clamped solve, plus a smooth interior
//! perturbation of a uniformly chosen demo whose covariance is
//! `a · (KᵀK)⁻¹` on the interior block `K`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AtpError, Result};
use crate::kinematics::{dls_solve, KinematicChain};
use crate::trajectory::{clamp_angles, SmoothnessOperator, Trajectory};

pub const DEFAULT_GOAL_SIGMA: f64 = 0.15;
/// Interior perturbation scale `a`. For `T = 49` the largest marginal
/// standard deviation of the perturbation is about 0.1 rad.
pub const DEFAULT_PERTURBATION_SCALE: f64 = 4e-6;
pub const DEFAULT_SAMPLES: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Per-joint standard deviation of the final-configuration shift (rad).
    pub goal_sigma: Vec<f64>,
    /// Scale `a` of the interior perturbation covariance.
    pub perturbation_scale: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn with_defaults(dof: usize) -> Self {
        Self {
            goal_sigma: vec![DEFAULT_GOAL_SIGMA; dof],
            perturbation_scale: DEFAULT_PERTURBATION_SCALE,
            n_samples: DEFAULT_SAMPLES,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.goal_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(AtpError::InvalidArgument("goal_sigma entries must be >= 0".into()));
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            return Err(AtpError::InvalidArgument("perturbation scale must be >= 0".into()));
        }
        if self.n_samples == 0 {
            return Err(AtpError::InvalidArgument("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// A training trajectory with its supervised goal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub trajectory: Trajectory,
    pub goal: Vec<f64>,
    pub source_demo: usize,
}

impl LabeledSample {
    /// Labels `trajectory` with the end-effector position of its last row.
    pub fn from_trajectory(chain: &KinematicChain, trajectory: Trajectory, source_demo: usize) -> Result<Self> {
        let goal = chain.forward_kinematics(&trajectory.last())?;
        Ok(Self {
            trajectory,
            goal: goal.iter().copied().collect(),
            source_demo,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub samples: Vec<LabeledSample>,
    /// Entries that fell outside `[-π, π]` and were clamped.
    pub clamped_entries: usize,
    pub total_entries: usize,
}

impl AugmentedDataset {
    pub fn clamped_fraction(&self) -> f64 {
        if self.total_entries == 0 {
            0.0
        } else {
            self.clamped_entries as f64 / self.total_entries as f64
        }
    }
}

/// Start configuration shared by every scripted demo.
pub fn home_configuration(dof: usize) -> Vec<f64> {
    let mut q = vec![FRAC_PI_2];
    if dof > 1 {
        q.extend(std::iter::repeat_n(-FRAC_PI_2 / (dof - 1) as f64, dof - 1));
    }
    q
}

/// Goal shared by the scripted demo families.
pub fn demo_goal(chain: &KinematicChain) -> Vec<f64> {
    let reach = chain.reach();
    match chain.workspace_dim() {
        2 => vec![0.5 * reach, -0.25 * reach],
        _ => vec![0.0, -0.7 * reach / 1.1, 0.2 * reach / 1.1],
    }
}

fn wrap_angle(a: f64) -> f64 {
    a.sin().atan2(a.cos())
}

/// Position-only inverse kinematics by repeated damped least-squares steps.
fn solve_position_ik(chain: &KinematicChain, goal: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
    chain.check_reachable(goal)?;
    let target = DVector::from_column_slice(goal);
    let mut q = seed.to_vec();
    for _ in 0..2000 {
        let err = &target - chain.forward_kinematics(&q)?;
        if err.norm() < 1e-12 {
            return Ok(q.into_iter().map(wrap_angle).collect());
        }
        let dq = dls_solve(&chain.jacobian(&q)?, err.as_slice(), 1e-3)?;
        for (qi, d) in q.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
    }
    let distance = (&target - chain.forward_kinematics(&q)?).norm();
    Err(AtpError::Unreachable {
        goal: goal.to_vec(),
        distance,
        reach: chain.reach(),
    })
}

fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Scripted stand-ins for kinesthetic demonstrations.
///
/// All demos start at [`home_configuration`] and end near [`demo_goal`].
/// Families differ in arm posture at the goal (elbow sign) and in the
/// direction of the mid-course arch; variants within a family differ in
/// the redundant posture at the goal and in arch amplitude.
pub fn generate_demos(
    chain: &KinematicChain,
    horizon: usize,
    family_count: usize,
    variants_per_family: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if family_count == 0 || variants_per_family == 0 {
        return Err(AtpError::InvalidArgument(
            "family_count and variants_per_family must be >= 1".into(),
        ));
    }
    if horizon < 2 {
        return Err(AtpError::InvalidArgument(format!("horizon T must be >= 2, got {horizon}")));
    }
    let dof = chain.dof();
    let home = home_configuration(dof);
    let base_goal = demo_goal(chain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::with_capacity(family_count * variants_per_family);
    for family in 0..family_count {
        let sign = if family % 2 == 0 { 1.0 } else { -1.0 };
        let tier = (family / 2) as f64;
        let heading = base_goal[1].atan2(base_goal[0]);
        for variant in 0..variants_per_family {
            let centered = variant as f64 - (variants_per_family - 1) as f64 / 2.0;
            let goal: Vec<f64> = base_goal.iter().map(|g| g + rng.random_range(-0.01..0.01)).collect();
            let mut ik_seed = vec![sign * (0.8 + 0.3 * tier); dof];
            ik_seed[0] = heading - sign * (0.6 + 0.3 * tier);
            if dof > 2 {
                ik_seed[dof - 1] += 0.3 * centered;
            }
            let goal_q = solve_position_ik(chain, &goal, &ik_seed)?;
            let amplitude = (0.35 + 0.06 * centered) * rng.random_range(0.95..1.05);
            let arch: Vec<f64> = (0..dof)
                .map(|j| sign * amplitude * if j % 2 == 0 { 1.0 } else { -0.6 })
                .collect();
            let mut points = DMatrix::zeros(horizon + 1, dof);
            for t in 0..=horizon {
                let s = t as f64 / horizon as f64;
                let blend = min_jerk(s);
                let bump = (PI * s).sin();
                for j in 0..dof {
                    points[(t, j)] = home[j] + blend * (goal_q[j] - home[j]) + bump * arch[j];
                }
            }
            // endpoints are exact by construction
            for j in 0..dof {
                points[(0, j)] = home[j];
                points[(horizon, j)] = goal_q[j];
            }
            let traj = Trajectory::new(points).map_err(|e| {
                AtpError::InvalidArgument(format!("scripted demo {family}/{variant} leaves joint range: {e}"))
            })?;
            demos.push(traj);
        }
    }
    Ok(demos)
}

/// Family index of each demo produced by [`generate_demos`].
pub fn demo_families(family_count: usize, variants_per_family: usize) -> Vec<usize> {
    (0..family_count)
        .flat_map(|f| std::iter::repeat_n(f, variants_per_family))
        .collect()
}

/// Draw `Δq_T ~ N(0, diag(σ²))` and spread it over the trajectory.
pub fn sample_goal_shift<R: Rng + ?Sized>(
    op: &SmoothnessOperator,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> DMatrix<f64> {
    let shift: Vec<f64> = cfg
        .goal_sigma
        .iter()
        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    op.propagate_goal_shift(&shift)
}

/// Interior noise with covariance `a·(KᵀK)⁻¹` per joint; rows 0 and T are zero.
pub fn sample_interior_noise<R: Rng + ?Sized>(
    op: &SmoothnessOperator,
    dof: usize,
    scale: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let steps = op.steps();
    let n = op.horizon() - 1;
    let factor = op.interior_gram_factor();
    let sd = scale.sqrt();
    let mut noise = DMatrix::zeros(steps, dof);
    let mut w = vec![0.0; n];
    for j in 0..dof {
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        // Lᵀ x = w  ⇒  cov(x) = (L Lᵀ)⁻¹
        factor.solve_upper_in_place(&mut w);
        for (i, v) in w.iter().enumerate() {
            noise[(i + 1, j)] = sd * v;
        }
    }
    noise
}

fn perturbed_points<R: Rng + ?Sized>(
    op: &SmoothnessOperator,
    demos: &[Trajectory],
    scale: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, usize)> {
    if demos.is_empty() {
        return Err(AtpError::InvalidArgument("no demonstrations to perturb".into()));
    }
    let m = rng.random_range(0..demos.len());
    let demo = &demos[m];
    check_dim("demo steps", op.steps(), demo.steps())?;
    let mut points = demo.points().clone();
    if scale > 0.0 {
        let noise = sample_interior_noise(op, demo.dof(), scale, rng);
        for j in 0..demo.dof() {
            for t in 1..op.horizon() {
                points[(t, j)] += noise[(t, j)];
            }
        }
    }
    Ok((points, m))
}

/// Smoothly perturb a uniformly chosen demo, keeping its first and last rows.
///
/// Returns the perturbed trajectory (clamped into `[-π, π]`) and the demo index.
pub fn sample_smooth_perturbation<R: Rng + ?Sized>(
    op: &SmoothnessOperator,
    demos: &[Trajectory],
    scale: f64,
    rng: &mut R,
) -> Result<(Trajectory, usize)> {
    if !(scale >= 0.0) {
        return Err(AtpError::InvalidArgument("perturbation scale must be >= 0".into()));
    }
    let (points, m) = perturbed_points(op, demos, scale, rng)?;
    let (traj, _) = Trajectory::new_clamped(points)?;
    Ok((traj, m))
}

/// RNG stream for sample `index`; independent of generation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Build the labeled training set from the demonstrations.
pub fn build_dataset(
    chain: &KinematicChain,
    op: &SmoothnessOperator,
    demos: &[Trajectory],
    cfg: &AugmentationConfig,
) -> Result<AugmentedDataset> {
    cfg.validate()?;
    check_dim("goal_sigma", chain.dof(), cfg.goal_sigma.len())?;
    for demo in demos {
        check_dim("demo dof", chain.dof(), demo.dof())?;
    }
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut clamped_entries = 0;
    let mut total_entries = 0;
    for i in 0..cfg.n_samples {
        let mut rng = sample_rng(cfg.seed, i as u64);
        let (mut points, m) = perturbed_points(op, demos, cfg.perturbation_scale, &mut rng)?;
        let shift = sample_goal_shift(op, cfg, &mut rng);
        for j in 0..points.ncols() {
            for t in 1..points.nrows() {
                points[(t, j)] += shift[(t, j)];
            }
        }
        total_entries += points.len();
        clamped_entries += clamp_angles(points.as_mut_slice());
        let trajectory = Trajectory::new(points)?;
        samples.push(LabeledSample::from_trajectory(chain, trajectory, m)?);
    }
    Ok(AugmentedDataset {
        samples,
        clamped_entries,
        total_entries,
    })
}

pub fn write_jsonl<W: Write>(mut out: W, samples: &[LabeledSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<LabeledSample>> {
    let mut samples = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: LabeledSample = serde_json::from_str(&line)
            .map_err(|e| AtpError::Format(format!("dataset line {}: {e}", n + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// A demonstration on disk: the trajectory plus its family and variant labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub family: usize,
    pub variant: usize,
    pub chain: KinematicChain,
    pub trajectory: Trajectory,
}

/// Label the output of [`generate_demos`].
pub fn demo_records(
    chain: &KinematicChain,
    demos: Vec<Trajectory>,
    variants_per_family: usize,
) -> Vec<DemoRecord> {
    demos
        .into_iter()
        .enumerate()
        .map(|(i, trajectory)| DemoRecord {
            family: i / variants_per_family,
            variant: i % variants_per_family,
            chain: chain.clone(),
            trajectory,
        })
        .collect()
}

/// Write one `demo_NN.json` per record into `dir`, creating it if needed.
pub fn save_demos(dir: &Path, records: &[DemoRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let path = dir.join(format!("demo_{i:02}.json"));
            fs::write(&path, serde_json::to_string_pretty(rec)?)?;
            Ok(path)
        })
        .collect()
}

/// Read every `*.json` in `dir` in file-name order. All demos must share one chain.
pub fn load_demos(dir: &Path) -> Result<Vec<DemoRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(AtpError::InvalidArgument(format!("no demo files in {}", dir.display())));
    }
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let rec: DemoRecord = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| AtpError::Format(format!("{}: {e}", path.display())))?;
        check_dim("demo dof", rec.chain.dof(), rec.trajectory.dof())?;
        if let Some(first) = records.first().map(|r: &DemoRecord| &r.chain) {
            if *first != rec.chain {
                return Err(AtpError::InvalidArgument(format!(
                    "{} uses a different chain than the other demos",
                    path.display()
                )));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (KinematicChain, SmoothnessOperator, Vec<Trajectory>) {
        let chain = KinematicChain::default_planar();
        let op = SmoothnessOperator::new(49).unwrap();
        let demos = generate_demos(&chain, 49, 2, 2, 7).unwrap();
        (chain, op, demos)
    }

    #[test]
    fn default_demos_have_table_shape() {
        let (chain, _, demos) = setup();
        assert_eq!(demos.len(), 4);
        let goal = demo_goal(&chain);
        for d in &demos {
            assert_eq!((d.steps(), d.dof()), (50, 3));
            assert_eq!(d.start(), vec![FRAC_PI_2, -PI / 4.0, -PI / 4.0]);
            let ee = chain.forward_kinematics(&d.last()).unwrap();
            assert!((ee[0] - goal[0]).abs() < 0.011 && (ee[1] - goal[1]).abs() < 0.011);
        }
    }

    #[test]
    fn demos_are_deterministic() {
        let chain = KinematicChain::default_planar();
        let a = generate_demos(&chain, 49, 2, 2, 7).unwrap();
        let b = generate_demos(&chain, 49, 2, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_demos(&chain, 49, 2, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn families_differ_more_than_variants() {
        let (_, _, demos) = setup();
        let within = demos[0].rmse(&demos[1]).unwrap().max(demos[2].rmse(&demos[3]).unwrap());
        let across = demos[0].rmse(&demos[2]).unwrap().min(demos[1].rmse(&demos[3]).unwrap());
        assert!(within > 0.02, "variants should differ: {within}");
        assert!(across > 3.0 * within, "across {across} within {within}");
    }

    #[test]
    fn demo_generation_errors() {
        let chain = KinematicChain::default_planar();
        assert!(generate_demos(&chain, 49, 0, 2, 7).is_err());
        assert!(generate_demos(&chain, 49, 2, 0, 7).is_err());
        // a single link can only reach its circle
        let stub = KinematicChain::new(vec![0.4], 2).unwrap();
        assert!(generate_demos(&stub, 49, 1, 1, 7).is_err());
    }

    #[test]
    fn spatial_demos() {
        let chain = KinematicChain::default_spatial();
        let demos = generate_demos(&chain, 49, 2, 2, 7).unwrap();
        assert_eq!(demos.len(), 4);
        let goal = chain.forward_kinematics(&demos[0].last()).unwrap();
        assert!((goal[1] + 0.7).abs() < 0.011 && (goal[2] - 0.2).abs() < 0.011);
    }

    #[test]
    fn zero_sigma_means_zero_shift() {
        let op = SmoothnessOperator::new(10).unwrap();
        let mut cfg = AugmentationConfig::with_defaults(3);
        cfg.goal_sigma = vec![0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_goal_shift(&op, &cfg, &mut rng).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn goal_shift_final_row_spread() {
        // the final row moves by T/(T+1) of the drawn shift
        let op = SmoothnessOperator::new(9).unwrap();
        let cfg = AugmentationConfig {
            goal_sigma: vec![0.2, 0.05],
            ..AugmentationConfig::with_defaults(2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let d = sample_goal_shift(&op, &cfg, &mut rng);
            assert!(d.row(0).iter().all(|v| *v == 0.0));
            for j in 0..2 {
                sq[j] += d[(9, j)].powi(2);
            }
        }
        for j in 0..2 {
            let sd = (sq[j] / n as f64).sqrt();
            let expected = cfg.goal_sigma[j] * 9.0 / 10.0;
            assert!((sd / expected - 1.0).abs() < 0.05, "joint {j}: {sd} vs {expected}");
        }
    }

    #[test]
    fn zero_scale_perturbation_copies_a_demo() {
        let (_, op, demos) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (traj, m) = sample_smooth_perturbation(&op, &demos, 0.0, &mut rng).unwrap();
            assert_eq!(traj, demos[m]);
        }
        assert!(sample_smooth_perturbation(&op, &[], 0.1, &mut rng).is_err());
    }

    #[test]
    fn perturbation_keeps_endpoints() {
        let (_, op, demos) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (traj, m) = sample_smooth_perturbation(&op, &demos, 1e-5, &mut rng).unwrap();
            assert_eq!(traj.start(), demos[m].start());
            assert_eq!(traj.last(), demos[m].last());
            assert_ne!(traj, demos[m]);
        }
    }

    #[test]
    fn dataset_labels_and_structure() {
        let (chain, op, demos) = setup();
        let cfg = AugmentationConfig {
            n_samples: 300,
            ..AugmentationConfig::with_defaults(3)
        };
        let data = build_dataset(&chain, &op, &demos, &cfg).unwrap();
        assert_eq!(data.samples.len(), 300);
        for s in &data.samples {
            let fk = chain.forward_kinematics(&s.trajectory.last()).unwrap();
            assert!(s.goal.iter().zip(fk.iter()).all(|(a, b)| (a - b).abs() <= 1e-12));
            assert_eq!(s.trajectory.start(), demos[s.source_demo].start());
        }
        assert!(data.clamped_fraction() < 0.01);
        let again = build_dataset(&chain, &op, &demos, &cfg).unwrap();
        assert_eq!(data.samples, again.samples);
    }

    #[test]
    fn vanishing_noise_reproduces_demos() {
        let (chain, op, demos) = setup();
        let cfg = AugmentationConfig {
            goal_sigma: vec![0.0; 3],
            perturbation_scale: 0.0,
            n_samples: 16,
            seed: 1,
        };
        let data = build_dataset(&chain, &op, &demos, &cfg).unwrap();
        for s in &data.samples {
            assert_eq!(s.trajectory, demos[s.source_demo]);
        }
    }

    #[test]
    fn samples_are_distinct() {
        let (chain, op, demos) = setup();
        let cfg = AugmentationConfig {
            goal_sigma: vec![0.0; 3],
            n_samples: 1000,
            ..AugmentationConfig::with_defaults(3)
        };
        let data = build_dataset(&chain, &op, &demos, &cfg).unwrap();
        let mut flats: Vec<Vec<u64>> = data
            .samples
            .iter()
            .map(|s| s.trajectory.to_flat().iter().map(|v| v.to_bits()).collect())
            .collect();
        flats.sort();
        flats.dedup();
        assert_eq!(flats.len(), 1000);
    }

    #[test]
    fn jsonl_round_trip() {
        let (chain, op, demos) = setup();
        let cfg = AugmentationConfig {
            n_samples: 5,
            ..AugmentationConfig::with_defaults(3)
        };
        let data = build_dataset(&chain, &op, &demos, &cfg).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data.samples).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 5);
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, data.samples);
        assert!(read_jsonl(&b"{\"nope\":1}\n"[..]).is_err());
    }

    #[test]
    fn demo_files_round_trip() {
        let (chain, _, demos) = setup();
        let records = demo_records(&chain, demos, 2);
        assert_eq!(records.iter().map(|r| r.family).collect::<Vec<_>>(), demo_families(2, 2));
        let dir = tempfile::tempdir().unwrap();
        let paths = save_demos(dir.path(), &records).unwrap();
        assert_eq!(paths.len(), 4);
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(load_demos(dir.path()).unwrap(), records);

        let mut other = records[0].clone();
        other.chain = KinematicChain::new(vec![0.5, 0.4, 0.2], 2).unwrap();
        fs::write(dir.path().join("demo_99.json"), serde_json::to_string(&other).unwrap()).unwrap();
        assert!(load_demos(dir.path()).is_err());
        assert!(load_demos(tempfile::tempdir().unwrap().path()).is_err());
    }
}
