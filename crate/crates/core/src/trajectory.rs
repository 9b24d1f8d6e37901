//! Joint-space trajectories and the second-difference smoothness operator.
//!
//! The operator `M` has a zero first row and column and the tridiagonal
//! `(-1, 2, -1)` pattern on indices `1..=T`. `M` is singular, so every
//! `M⁻¹ v` is evaluated as "zero at index 0, banded solve on the rest",
//! which is the pseudo-inverse action for `v` supported off index 0.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::banded::BandCholesky;
use crate::error::{check_dim, AtpError, Result};

/// `(T+1) × d` joint angles; row `t` is the configuration at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryFile", into = "TrajectoryFile")]
pub struct Trajectory {
    points: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    dof: usize,
    steps: usize,
    data: Vec<Vec<f64>>,
}

impl TryFrom<TrajectoryFile> for Trajectory {
    type Error = AtpError;

    fn try_from(file: TrajectoryFile) -> Result<Self> {
        check_dim("trajectory steps", file.steps, file.data.len())?;
        for row in &file.data {
            check_dim("trajectory dof", file.dof, row.len())?;
        }
        Trajectory::from_rows(&file.data)
    }
}

impl From<Trajectory> for TrajectoryFile {
    fn from(traj: Trajectory) -> Self {
        TrajectoryFile {
            dof: traj.dof(),
            steps: traj.steps(),
            data: traj.rows(),
        }
    }
}

impl Trajectory {
    pub const MIN_STEPS: usize = 3;

    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() < Self::MIN_STEPS {
            return Err(AtpError::InvalidArgument(format!(
                "trajectory needs at least {} rows, got {}",
                Self::MIN_STEPS,
                points.nrows()
            )));
        }
        if points.ncols() == 0 {
            return Err(AtpError::InvalidArgument("trajectory needs at least one joint".into()));
        }
        if let Some(v) = points.iter().find(|v| !(-PI..=PI).contains(*v)) {
            return Err(AtpError::InvalidArgument(format!("joint angle {v} outside [-pi, pi]")));
        }
        Ok(Self { points })
    }

    /// Like [`Trajectory::new`] but clamps entries into `[-π, π]`, returning how many moved.
    pub fn new_clamped(mut points: DMatrix<f64>) -> Result<(Self, usize)> {
        if points.iter().any(|v| v.is_nan()) {
            return Err(AtpError::NonFinite("trajectory"));
        }
        let clamped = clamp_angles(points.as_mut_slice());
        Ok((Self::new(points)?, clamped))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dof = rows.first().map_or(0, Vec::len);
        for row in rows {
            check_dim("trajectory dof", dof, row.len())?;
        }
        Self::new(DMatrix::from_fn(rows.len(), dof, |r, c| rows[r][c]))
    }

    /// Rows stored back to back (`t`-major), the layout fed to the networks.
    pub fn from_flat(steps: usize, dof: usize, flat: &[f64]) -> Result<Self> {
        check_dim("flat trajectory", steps * dof, flat.len())?;
        Self::new(DMatrix::from_row_slice(steps, dof, flat))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len());
        for r in 0..self.steps() {
            out.extend(self.points.row(r).iter());
        }
        out
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn into_points(self) -> DMatrix<f64> {
        self.points
    }

    /// Number of rows, `T + 1`.
    pub fn steps(&self) -> usize {
        self.points.nrows()
    }

    pub fn dof(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.points.row(t).iter().copied().collect()
    }

    pub fn start(&self) -> Vec<f64> {
        self.row(0)
    }

    pub fn last(&self) -> Vec<f64> {
        self.row(self.steps() - 1)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.steps()).map(|t| self.row(t)).collect()
    }

    /// Root-mean-square joint difference over all entries.
    pub fn rmse(&self, other: &Trajectory) -> Result<f64> {
        check_dim("trajectory steps", self.steps(), other.steps())?;
        check_dim("trajectory dof", self.dof(), other.dof())?;
        let sq: f64 = self.points.iter().zip(other.points.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        Ok((sq / self.points.len() as f64).sqrt())
    }
}

pub(crate) fn clamp_angles(values: &mut [f64]) -> usize {
    let mut count = 0;
    for v in values.iter_mut() {
        if *v > PI {
            *v = PI;
            count += 1;
        } else if *v < -PI {
            *v = -PI;
            count += 1;
        }
    }
    count
}

fn second_difference(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => 2.0,
        1 => -1.0,
        _ => 0.0,
    })
}

/// The smoothness operator for trajectories with `T + 1` rows.
#[derive(Debug, Clone)]
pub struct SmoothnessOperator {
    horizon: usize,
    interior: BandCholesky,
    interior_gram: BandCholesky,
    /// `start_clamped⁻¹ e_T`, the unit goal-shift ramp over rows `1..=T`.
    goal_profile: Vec<f64>,
}

impl SmoothnessOperator {
    /// Operator for horizon `T` (trajectories of `T + 1` rows), `T >= 2`.
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(AtpError::InvalidArgument(format!("horizon T must be >= 2, got {horizon}")));
        }
        let start_block = second_difference(horizon);
        let interior_block = second_difference(horizon - 1);
        let gram = interior_block.transpose() * &interior_block;
        let start_clamped = BandCholesky::factor(&start_block, 1)?;
        let interior = BandCholesky::factor(&interior_block, 1)?;
        let interior_gram = BandCholesky::factor(&gram, 2)?;
        let mut goal_profile = vec![0.0; horizon];
        goal_profile[horizon - 1] = 1.0;
        start_clamped.solve_in_place(&mut goal_profile);
        Ok(Self {
            horizon,
            interior,
            interior_gram,
            goal_profile,
        })
    }

    /// Operator sized for trajectories with `steps` rows.
    pub fn for_steps(steps: usize) -> Result<Self> {
        Self::new(steps.saturating_sub(1))
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.horizon + 1
    }

    /// Dense `M`, `(T+1) × (T+1)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.steps(), self.steps());
        m.view_mut((1, 1), (self.horizon, self.horizon))
            .copy_from(&second_difference(self.horizon));
        m
    }

    /// The `T × T` block over rows `1..=T`.
    pub fn start_clamped_block(&self) -> DMatrix<f64> {
        second_difference(self.horizon)
    }

    /// The `(T-1) × (T-1)` block over rows `1..T`.
    pub fn interior_block(&self) -> DMatrix<f64> {
        second_difference(self.horizon - 1)
    }

    pub(crate) fn interior_factor(&self) -> &BandCholesky {
        &self.interior
    }

    pub(crate) fn interior_gram_factor(&self) -> &BandCholesky {
        &self.interior_gram
    }

    /// Ramp `u` with `u[0] = 0` and `u[1..=T] = start_clamped⁻¹ e_T`.
    pub fn goal_profile(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.goal_profile.iter().copied()).collect()
    }

    /// Spread a final-configuration shift over the whole trajectory: `M⁻¹ [0, …, 0, Δq_T]ᵀ`.
    ///
    /// Row 0 is exactly zero. The last row moves by `T/(T+1)` of `shift`.
    pub fn propagate_goal_shift(&self, shift: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.steps(), shift.len());
        for (t, w) in self.goal_profile.iter().enumerate() {
            for (j, dq) in shift.iter().enumerate() {
                out[(t + 1, j)] = w * dq;
            }
        }
        out
    }

    /// `Σ_j ξ_jᵀ M ξ_j` over the joint columns of `points`.
    pub fn quadratic_form(&self, points: &DMatrix<f64>) -> Result<f64> {
        check_dim("trajectory steps", self.steps(), points.nrows())?;
        let t_max = self.horizon;
        let mut total = 0.0;
        for col in points.column_iter() {
            for t in 1..=t_max {
                let mut mv = 2.0 * col[t];
                if t > 1 {
                    mv -= col[t - 1];
                }
                if t < t_max {
                    mv -= col[t + 1];
                }
                total += col[t] * mv;
            }
        }
        Ok(total)
    }

    pub fn smoothness_norm(&self, traj: &Trajectory) -> Result<f64> {
        self.quadratic_form(traj.points())
    }
}
