//! Projection of decoded trajectories onto the goal constraint.
//!
//! Goal steps move the final configuration by a damped least-squares
//! correction and spread it over the trajectory with the start-clamped
//! solve. Smoothing steps are covariant CHOMP updates on the smoothness
//! cost of the start-relative trajectory, with both endpoints held.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AtpError, Result};
use crate::kinematics::{dls_solve, KinematicChain, DEFAULT_DAMPING};
use crate::trajectory::{clamp_angles, SmoothnessOperator, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// CHOMP regularization `η`.
    pub eta: f64,
    /// Goal-step learning rate `α`.
    pub alpha: f64,
    pub damping: f64,
    /// Goal tolerance in meters.
    pub tol: f64,
    pub max_iters: usize,
    /// One smoothing step after every `smooth_every` goal steps; 0 disables smoothing.
    pub smooth_every: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            eta: 10.0,
            alpha: 0.5,
            damping: DEFAULT_DAMPING,
            tol: 1e-4,
            max_iters: 200,
            smooth_every: 5,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.damping >= 0.0
            && self.tol > 0.0
            && self.max_iters >= 1;
        if !ok {
            return Err(AtpError::InvalidArgument(format!("invalid projection config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub iters: usize,
    pub err_before_m: f64,
    pub err_after_m: f64,
    pub converged: bool,
}

/// End-effector distance from `goal` at the last row of `traj`.
pub fn goal_error(chain: &KinematicChain, traj: &Trajectory, goal: &[f64]) -> Result<f64> {
    let ee = chain.forward_kinematics(&traj.last())?;
    check_dim("goal", ee.len(), goal.len())?;
    Ok((ee - DVector::from_column_slice(goal)).norm())
}

fn start_relative(traj: &Trajectory) -> DMatrix<f64> {
    let mut rel = traj.points().clone();
    let start = traj.start();
    for mut row in rel.row_iter_mut() {
        for (v, s) in row.iter_mut().zip(&start) {
            *v -= s;
        }
    }
    rel
}

/// `½ Σ_j (ξ_j − q_0)ᵀ M (ξ_j − q_0)`, the cost a smoothing step descends.
pub fn smoothing_cost(op: &SmoothnessOperator, traj: &Trajectory) -> Result<f64> {
    Ok(0.5 * op.quadratic_form(&start_relative(traj))?)
}

/// One covariant CHOMP step `ξ ← ξ − (1/η) M⁻¹ g` on the smoothness cost.
///
/// The first and last rows are held; the interior moves toward the joint-space
/// straight line between them. For `η ≥ 1` the cost never increases.
pub fn chomp_smooth_step(op: &SmoothnessOperator, traj: &Trajectory, eta: f64) -> Result<Trajectory> {
    check_dim("trajectory steps", op.steps(), traj.steps())?;
    if !(eta > 0.0) {
        return Err(AtpError::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    let horizon = op.horizon();
    let rel = start_relative(traj);
    let mut points = traj.points().clone();
    let mut grad = vec![0.0; horizon - 1];
    for j in 0..traj.dof() {
        let col = rel.column(j);
        for t in 1..horizon {
            // row 0 of the start-relative trajectory is zero
            grad[t - 1] = 2.0 * col[t] - col[t - 1] - col[t + 1];
        }
        op.interior_factor().solve_in_place(&mut grad);
        for t in 1..horizon {
            points[(t, j)] -= grad[t - 1] / eta;
        }
    }
    clamp_angles(&mut points.as_mut_slice()[..]);
    Trajectory::new(points)
}

/// Final-configuration correction `Jᵀ(JJᵀ + λ²I)⁻¹ (x_g − x_end(q_T))`.
pub fn goal_correction(chain: &KinematicChain, traj: &Trajectory, goal: &[f64], damping: f64) -> Result<DVector<f64>> {
    let q_t = traj.last();
    let residual = DVector::from_column_slice(goal) - chain.forward_kinematics(&q_t)?;
    dls_solve(&chain.jacobian(&q_t)?, residual.as_slice(), damping)
}

/// `ξ ← ξ + α M⁻¹ [0, …, 0, Δq̃_T]ᵀ`, then clamp into `[-π, π]`. Row 0 is untouched.
pub fn goal_projection_step(
    chain: &KinematicChain,
    op: &SmoothnessOperator,
    traj: &Trajectory,
    goal: &[f64],
    cfg: &ProjectionConfig,
) -> Result<Trajectory> {
    check_dim("trajectory steps", op.steps(), traj.steps())?;
    check_dim("trajectory dof", chain.dof(), traj.dof())?;
    chain.check_reachable(goal)?;
    let correction = goal_correction(chain, traj, goal, cfg.damping)?;
    if correction.iter().all(|v| *v == 0.0) {
        return Ok(traj.clone());
    }
    let shift: Vec<f64> = correction.iter().map(|v| cfg.alpha * v).collect();
    let displacement = op.propagate_goal_shift(&shift);
    let mut points = traj.points().clone();
    for j in 0..points.ncols() {
        for t in 1..points.nrows() {
            points[(t, j)] += displacement[(t, j)];
        }
    }
    clamp_angles(points.as_mut_slice());
    Trajectory::new(points)
}

/// Outcome of [`project_to_constraints`] when the tolerance was not reached.
#[derive(Debug, Clone)]
pub struct NotConverged {
    pub best: Trajectory,
    pub report: ProjectionReport,
}

/// Iterate goal steps (with periodic smoothing) until the end-effector is
/// within `cfg.tol` of `goal`.
///
/// Returns `Ok(Err(..))` with the best trajectory seen when `max_iters` runs out.
pub fn project_to_constraints(
    chain: &KinematicChain,
    op: &SmoothnessOperator,
    traj: &Trajectory,
    goal: &[f64],
    cfg: &ProjectionConfig,
) -> Result<std::result::Result<(Trajectory, ProjectionReport), NotConverged>> {
    cfg.validate()?;
    chain.check_reachable(goal)?;
    let err_before = goal_error(chain, traj, goal)?;
    if err_before < cfg.tol {
        return Ok(Ok((
            traj.clone(),
            ProjectionReport {
                iters: 0,
                err_before_m: err_before,
                err_after_m: err_before,
                converged: true,
            },
        )));
    }
    let mut current = traj.clone();
    let mut best = (traj.clone(), err_before, 0);
    for iter in 1..=cfg.max_iters {
        current = goal_projection_step(chain, op, &current, goal, cfg)?;
        if cfg.smooth_every > 0 && iter % cfg.smooth_every == 0 {
            current = chomp_smooth_step(op, &current, cfg.eta)?;
        }
        let err = goal_error(chain, &current, goal)?;
        if err < best.1 {
            best = (current.clone(), err, iter);
        }
        if err < cfg.tol {
            return Ok(Ok((
                current,
                ProjectionReport {
                    iters: iter,
                    err_before_m: err_before,
                    err_after_m: err,
                    converged: true,
                },
            )));
        }
    }
    let (best, err, _) = best;
    Ok(Err(NotConverged {
        best,
        report: ProjectionReport {
            iters: cfg.max_iters,
            err_before_m: err_before,
            err_after_m: err,
            converged: false,
        },
    }))
}
