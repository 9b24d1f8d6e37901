//! Planning with a trained model: decode a latent code at a goal, then
//! optionally project the result onto the goal constraint.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atpmodel::{one_hot, AtpModel, LatentCode};
use crate::augmentation::sample_rng;
use crate::error::{check_dim, AtpError, Result};
use crate::kinematics::KinematicChain;
use crate::projection::{goal_error, project_to_constraints, ProjectionConfig, ProjectionReport};
use crate::trajectory::{SmoothnessOperator, Trajectory};

/// Discrete code given either as a class index or as a probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassCode {
    Index(usize),
    Vector(Vec<f64>),
}

impl ClassCode {
    pub fn to_vector(&self, k_c: usize) -> Result<Vec<f64>> {
        match self {
            ClassCode::Index(i) if *i < k_c => Ok(one_hot(k_c, *i)),
            ClassCode::Index(i) => Err(AtpError::InvalidArgument(format!(
                "class index {i} out of range for {k_c} classes"
            ))),
            ClassCode::Vector(v) => {
                check_dim("c", k_c, v.len())?;
                Ok(v.clone())
            }
        }
    }
}

/// Per-request overrides of [`ProjectionConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionOverrides {
    pub eta: Option<f64>,
    pub alpha: Option<f64>,
    pub damping: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub smooth_every: Option<usize>,
}

impl ProjectionOverrides {
    pub fn apply(&self, base: &ProjectionConfig) -> ProjectionConfig {
        ProjectionConfig {
            eta: self.eta.unwrap_or(base.eta),
            alpha: self.alpha.unwrap_or(base.alpha),
            damping: self.damping.unwrap_or(base.damping),
            tol: self.tol.unwrap_or(base.tol),
            max_iters: self.max_iters.unwrap_or(base.max_iters),
            smooth_every: self.smooth_every.unwrap_or(base.smooth_every),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub z: Vec<f64>,
    pub c: ClassCode,
    pub goal: Vec<f64>,
    #[serde(default = "default_project")]
    pub project: bool,
    #[serde(default)]
    pub cfg: ProjectionOverrides,
}

fn default_project() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    /// End-effector position at every row.
    pub ee_path: Vec<Vec<f64>>,
    pub err_before_m: f64,
    pub err_after_m: f64,
    /// Present when projection ran.
    pub report: Option<ProjectionReport>,
}

impl PlanResult {
    pub fn converged(&self) -> bool {
        self.report.as_ref().is_none_or(|r| r.converged)
    }
}

pub fn ee_path(chain: &KinematicChain, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    (0..traj.steps())
        .map(|t| Ok(chain.forward_kinematics(&traj.row(t))?.as_slice().to_vec()))
        .collect()
}

/// Like [`plan`], but a projection that runs out of iterations still returns
/// its best trajectory with `report.converged == false`.
pub fn plan_lenient(model: &AtpModel, req: &PlanRequest, base: &ProjectionConfig) -> Result<PlanResult> {
    let dims = model.dims();
    let chain = model.chain();
    check_dim("z", dims.k_z, req.z.len())?;
    check_dim("goal", dims.workspace_dim, req.goal.len())?;
    if req.z.iter().chain(&req.goal).any(|v| !v.is_finite()) {
        return Err(AtpError::NonFinite("plan request"));
    }
    chain.check_reachable(&req.goal)?;
    let c = req.c.to_vector(dims.k_c)?;
    let decoded = model.decode(&req.z, &c, &req.goal)?;
    let err_before = goal_error(chain, &decoded, &req.goal)?;
    let (trajectory, report) = if req.project {
        let cfg = req.cfg.apply(base);
        let op = SmoothnessOperator::for_steps(dims.steps)?;
        match project_to_constraints(chain, &op, &decoded, &req.goal, &cfg)? {
            Ok((traj, report)) => (traj, Some(report)),
            Err(failure) => (failure.best, Some(failure.report)),
        }
    } else {
        (decoded, None)
    };
    let err_after = report.as_ref().map_or(err_before, |r| r.err_after_m);
    Ok(PlanResult {
        ee_path: ee_path(chain, &trajectory)?,
        trajectory,
        err_before_m: err_before,
        err_after_m: err_after,
        report,
    })
}

/// Decode `(z, c)` at `goal`, projecting when `req.project` is set.
///
/// Projection that does not reach `tol` fails with
/// [`AtpError::NotConverged`] carrying the best result found.
pub fn plan(model: &AtpModel, req: &PlanRequest, base: &ProjectionConfig) -> Result<PlanResult> {
    let result = plan_lenient(model, req, base)?;
    if result.converged() {
        Ok(result)
    } else {
        Err(AtpError::NotConverged(Box::new(result)))
    }
}

/// Encode `traj` (posterior mean, argmax class) and decode it at its own goal.
pub fn reconstruct(model: &AtpModel, traj: &Trajectory) -> Result<(LatentCode, Trajectory)> {
    let (code, _) = model.infer_code(traj)?;
    let goal = model.chain().forward_kinematics(&traj.last())?;
    let out = model.decode(&code.z, &code.c, goal.as_slice())?;
    Ok((code, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "index")]
pub enum TraversalAxis {
    /// Vary one continuous unit over the grid.
    Continuous(usize),
    /// Step through every class; the grid is ignored.
    Discrete,
}

/// Plan once per grid value with every other code entry held at `base`.
pub fn latent_traversal(
    model: &AtpModel,
    base: &PlanRequest,
    axis: TraversalAxis,
    grid: &[f64],
    cfg: &ProjectionConfig,
) -> Result<Vec<PlanResult>> {
    let dims = model.dims();
    match axis {
        TraversalAxis::Continuous(i) => {
            if i >= dims.k_z {
                return Err(AtpError::InvalidArgument(format!(
                    "continuous axis {i} out of range for {} units",
                    dims.k_z
                )));
            }
            if grid.is_empty() {
                return Err(AtpError::InvalidArgument("traversal grid is empty".into()));
            }
            grid.iter()
                .map(|v| {
                    let mut req = base.clone();
                    req.z[i] = *v;
                    plan_lenient(model, &req, cfg)
                })
                .collect()
        }
        TraversalAxis::Discrete => (0..dims.k_c)
            .map(|k| {
                let mut req = base.clone();
                req.c = ClassCode::Index(k);
                plan_lenient(model, &req, cfg)
            })
            .collect(),
    }
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Goals drawn the way augmentation moves the goal: shift a random demo's
/// final configuration by `N(0, diag(σ²))` and take its end-effector position.
///
/// Returns each goal with the demo it came from.
pub fn sample_region_goals(
    chain: &KinematicChain,
    demos: &[Trajectory],
    goal_sigma: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if demos.is_empty() {
        return Err(AtpError::InvalidArgument("no demonstrations".into()));
    }
    check_dim("goal_sigma", chain.dof(), goal_sigma.len())?;
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let m = rng.random_range(0..demos.len());
            let q: Vec<f64> = demos[m]
                .last()
                .iter()
                .zip(goal_sigma)
                .map(|(q, s)| q + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok((chain.forward_kinematics(&q)?.as_slice().to_vec(), m))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEvaluation {
    pub goal: Vec<f64>,
    pub err_before_m: f64,
    pub err_after_m: f64,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSummary {
    pub rows: Vec<GoalEvaluation>,
    pub median_before_m: f64,
    pub p95_before_m: f64,
    pub median_after_m: f64,
    pub p95_after_m: f64,
    pub converged_fraction: f64,
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Plan each `(goal, code)` pair with projection and summarize the errors.
pub fn evaluate_generalization(
    model: &AtpModel,
    cases: &[(Vec<f64>, LatentCode)],
    cfg: &ProjectionConfig,
) -> Result<GeneralizationSummary> {
    let mut rows = Vec::with_capacity(cases.len());
    for (goal, code) in cases {
        let req = PlanRequest {
            z: code.z.clone(),
            c: ClassCode::Vector(code.c.clone()),
            goal: goal.clone(),
            project: true,
            cfg: ProjectionOverrides::default(),
        };
        let result = plan_lenient(model, &req, cfg)?;
        let report = result.report.expect("projection ran");
        rows.push(GoalEvaluation {
            goal: goal.clone(),
            err_before_m: report.err_before_m,
            err_after_m: report.err_after_m,
            iters: report.iters,
            converged: report.converged,
        });
    }
    let before: Vec<f64> = rows.iter().map(|r| r.err_before_m).collect();
    let after: Vec<f64> = rows.iter().map(|r| r.err_after_m).collect();
    let converged = rows.iter().filter(|r| r.converged).count();
    Ok(GeneralizationSummary {
        median_before_m: percentile(&before, 50.0),
        p95_before_m: percentile(&before, 95.0),
        median_after_m: percentile(&after, 50.0),
        p95_after_m: percentile(&after, 95.0),
        converged_fraction: converged as f64 / rows.len().max(1) as f64,
        rows,
    })
}

/// CSV with header `goal_x,goal_y[,goal_z],err_before_m,err_after_m,iters,converged`.
pub fn write_generalization_csv<W: Write>(mut out: W, summary: &GeneralizationSummary) -> Result<()> {
    let dim = summary.rows.first().map_or(2, |r| r.goal.len());
    let axes = ["goal_x", "goal_y", "goal_z"];
    let mut header: Vec<&str> = axes[..dim.min(3)].to_vec();
    header.extend(["err_before_m", "err_after_m", "iters", "converged"]);
    writeln!(out, "{}", header.join(","))?;
    for r in &summary.rows {
        let goal: Vec<String> = r.goal.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            goal.join(","),
            r.err_before_m,
            r.err_after_m,
            r.iters,
            r.converged
        )?;
    }
    Ok(())
}
