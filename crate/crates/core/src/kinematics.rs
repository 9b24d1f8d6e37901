//! Analytic kinematics of a serial revolute chain.
//!
//! Planar chains rotate every joint about the world z axis. Spatial chains
//! alternate z and y rotation axes (joint 0 about z, joint 1 about y, ...),
//! with every link extending along its local x axis.

use std::f64::consts::PI;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AtpError, Result};

/// Damping used when the caller does not specify one.
pub const DEFAULT_DAMPING: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainFile", into = "ChainFile")]
pub struct KinematicChain {
    link_lengths: Vec<f64>,
    workspace_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    workspace_dim: usize,
    link_lengths: Vec<f64>,
}

impl TryFrom<ChainFile> for KinematicChain {
    type Error = AtpError;

    fn try_from(file: ChainFile) -> Result<Self> {
        KinematicChain::new(file.link_lengths, file.workspace_dim)
    }
}

impl From<KinematicChain> for ChainFile {
    fn from(chain: KinematicChain) -> Self {
        ChainFile {
            workspace_dim: chain.workspace_dim,
            link_lengths: chain.link_lengths,
        }
    }
}

impl KinematicChain {
    pub fn new(link_lengths: Vec<f64>, workspace_dim: usize) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(AtpError::InvalidArgument("chain needs at least one link".into()));
        }
        if link_lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(AtpError::InvalidArgument(format!(
                "link lengths must be positive, got {link_lengths:?}"
            )));
        }
        if workspace_dim != 2 && workspace_dim != 3 {
            return Err(AtpError::InvalidArgument(format!(
                "workspace_dim must be 2 or 3, got {workspace_dim}"
            )));
        }
        Ok(Self {
            link_lengths,
            workspace_dim,
        })
    }

    /// The planar 3-link arm used throughout the desk-scale experiments.
    pub fn default_planar() -> Self {
        Self::new(vec![0.4, 0.4, 0.3], 2).expect("valid default chain")
    }

    /// Spatial variant of the default arm.
    pub fn default_spatial() -> Self {
        Self::new(vec![0.4, 0.4, 0.3], 3).expect("valid default chain")
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn workspace_dim(&self) -> usize {
        self.workspace_dim
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    /// Upper bound on the end-effector distance from the base.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Fails with [`AtpError::Unreachable`] when `goal` lies outside the reach sphere.
    pub fn check_reachable(&self, goal: &[f64]) -> Result<()> {
        check_dim("goal", self.workspace_dim, goal.len())?;
        let distance = goal.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !distance.is_finite() || distance > self.reach() {
            return Err(AtpError::Unreachable {
                goal: goal.to_vec(),
                distance,
                reach: self.reach(),
            });
        }
        Ok(())
    }

    fn axis(&self, joint: usize) -> Vector3<f64> {
        if self.workspace_dim == 2 || joint.is_multiple_of(2) {
            Vector3::z()
        } else {
            Vector3::y()
        }
    }

    /// Joint positions, joint axes (world frame) and the end-effector position.
    fn frames(&self, q: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vector3<f64>) {
        let mut rot = Matrix3::identity();
        let mut p = Vector3::zeros();
        let mut origins = Vec::with_capacity(q.len());
        let mut axes = Vec::with_capacity(q.len());
        for (i, (&angle, &length)) in q.iter().zip(&self.link_lengths).enumerate() {
            let local_axis = self.axis(i);
            origins.push(p);
            axes.push(rot * local_axis);
            let joint = Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(local_axis), angle);
            rot *= joint.matrix();
            p += rot * Vector3::new(length, 0.0, 0.0);
        }
        (origins, axes, p)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<DVector<f64>> {
        check_dim("configuration", self.dof(), q.len())?;
        if self.workspace_dim == 2 {
            // cumulative-angle closed form
            let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
            for (angle, length) in q.iter().zip(&self.link_lengths) {
                theta += angle;
                x += length * theta.cos();
                y += length * theta.sin();
            }
            return Ok(DVector::from_vec(vec![x, y]));
        }
        let (_, _, p) = self.frames(q);
        Ok(DVector::from_column_slice(p.as_slice()))
    }

    /// Position Jacobian, `workspace_dim × dof`.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("configuration", self.dof(), q.len())?;
        let (origins, axes, end) = self.frames(q);
        let mut jac = DMatrix::zeros(self.workspace_dim, self.dof());
        for (j, (origin, axis)) in origins.iter().zip(&axes).enumerate() {
            let col = axis.cross(&(end - origin));
            for r in 0..self.workspace_dim {
                jac[(r, j)] = col[r];
            }
        }
        Ok(jac)
    }
}

/// Joint angles of one configuration, each in `[-π, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration(Vec<f64>);

impl Configuration {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if let Some(a) = angles.iter().find(|a| !(-PI..=PI).contains(*a)) {
            return Err(AtpError::InvalidArgument(format!(
                "joint angle {a} outside [-pi, pi]"
            )));
        }
        Ok(Self(angles))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Configuration {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Damped least-squares solve `Jᵀ(JJᵀ + λ²I)⁻¹ r`.
///
/// With `damping == 0` a rank-deficient `J` is reported as
/// [`AtpError::Singular`] instead of returning a huge step.
pub fn dls_solve(jac: &DMatrix<f64>, residual: &[f64], damping: f64) -> Result<DVector<f64>> {
    check_dim("dls residual", jac.nrows(), residual.len())?;
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(AtpError::InvalidArgument(format!("damping must be >= 0, got {damping}")));
    }
    let m = jac.nrows();
    let mut gram = jac * jac.transpose();
    for i in 0..m {
        gram[(i, i)] += damping * damping;
    }
    let scale = gram.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let chol = gram.clone().cholesky().ok_or(AtpError::Singular("dls_solve"))?;
    if damping == 0.0 {
        let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v * v));
        if scale == 0.0 || min_pivot <= 1e-14 * scale {
            return Err(AtpError::Singular("dls_solve"));
        }
    }
    let y = chol.solve(&DVector::from_column_slice(residual));
    Ok(jac.transpose() * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn two_link() -> KinematicChain {
        KinematicChain::new(vec![1.0, 1.0], 2).unwrap()
    }

    fn fd_jacobian(chain: &KinematicChain, q: &[f64]) -> DMatrix<f64> {
        let h = 1e-6;
        let mut jac = DMatrix::zeros(chain.workspace_dim(), chain.dof());
        for j in 0..chain.dof() {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[j] += h;
            qm[j] -= h;
            let diff = (chain.forward_kinematics(&qp).unwrap() - chain.forward_kinematics(&qm).unwrap()) / (2.0 * h);
            jac.set_column(j, &diff);
        }
        jac
    }

    #[test]
    fn fk_examples() {
        let chain = two_link();
        let p = chain.forward_kinematics(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), [2.0, 0.0].as_slice(), epsilon = 1e-15);
        let p = chain.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), [0.0, 2.0].as_slice(), epsilon = 1e-15);
        let p = chain.forward_kinematics(&[FRAC_PI_2, -FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), [1.0, 1.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn fk_rejects_wrong_length() {
        assert!(matches!(
            two_link().forward_kinematics(&[0.0]),
            Err(AtpError::DimensionMismatch { .. })
        ));
        assert!(two_link().jacobian(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let jac = two_link().jacobian(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(jac, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 1.0]), epsilon = 1e-15);
        let single = KinematicChain::new(vec![1.0], 2).unwrap();
        let jac = single.jacobian(&[FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(jac, DMatrix::from_row_slice(2, 1, &[-1.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn spatial_chain_straight_along_x() {
        let chain = KinematicChain::default_spatial();
        let p = chain.forward_kinematics(&[0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), [1.1, 0.0, 0.0].as_slice(), epsilon = 1e-15);
        // pitching joint 1 by -pi/2 lifts the distal links onto +z
        let p = chain.forward_kinematics(&[0.0, -FRAC_PI_2, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), [0.4, 0.0, 0.7].as_slice(), epsilon = 1e-12);
    }

    #[test]
    fn chain_validation() {
        assert!(KinematicChain::new(vec![], 2).is_err());
        assert!(KinematicChain::new(vec![0.4, 0.0], 2).is_err());
        assert!(KinematicChain::new(vec![0.4], 4).is_err());
        let parsed: KinematicChain =
            serde_json::from_str(r#"{"workspace_dim":2, "link_lengths":[0.4,0.4,0.3]}"#).unwrap();
        assert_eq!(parsed, KinematicChain::default_planar());
        assert!(serde_json::from_str::<KinematicChain>(r#"{"workspace_dim":2,"link_lengths":[-1]}"#).is_err());
    }

    #[test]
    fn configuration_bounds() {
        assert!(Configuration::new(vec![PI, -PI, 0.0]).is_ok());
        assert!(Configuration::new(vec![3.2]).is_err());
    }

    #[test]
    fn dls_examples() {
        let eye = DMatrix::identity(2, 2);
        let dq = dls_solve(&eye, &[1.0, 2.0], 0.0).unwrap();
        assert_abs_diff_eq!(dq.as_slice(), [1.0, 2.0].as_slice(), epsilon = 1e-15);
        let diag = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let dq = dls_solve(&diag, &[2.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(dq.as_slice(), [1.0, 1.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn dls_singular_without_damping() {
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(dls_solve(&jac, &[1.0, 0.0], 0.0), Err(AtpError::Singular(_))));
        assert!(dls_solve(&jac, &[1.0, 0.0], 1e-3).is_ok());
        assert!(dls_solve(&DMatrix::zeros(2, 3), &[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn dls_residual_shrinks_as_damping_vanishes() {
        let jac = DMatrix::from_row_slice(2, 3, &[0.3, -1.2, 0.5, 0.9, 0.1, -0.4]);
        let r = [0.2, -0.1];
        let mut last = f64::INFINITY;
        for damping in [1.0, 0.3, 0.1, 0.03, 0.01, 1e-3, 0.0] {
            let dq = dls_solve(&jac, &r, damping).unwrap();
            let res = (&jac * dq - DVector::from_column_slice(&r)).norm();
            assert!(res <= last + 1e-15, "{damping}: {res} > {last}");
            last = res;
        }
        assert!(last < 1e-12);
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            q in proptest::collection::vec(-PI..PI, 3),
            spatial in any::<bool>(),
        ) {
            let chain = if spatial { KinematicChain::default_spatial() } else { KinematicChain::default_planar() };
            let jac = chain.jacobian(&q).unwrap();
            let fd = fd_jacobian(&chain, &q);
            prop_assert!((jac - fd).amax() < 1e-6);
        }

        #[test]
        fn fk_within_reach(q in proptest::collection::vec(-PI..PI, 3), spatial in any::<bool>()) {
            let chain = if spatial { KinematicChain::default_spatial() } else { KinematicChain::default_planar() };
            prop_assert!(chain.forward_kinematics(&q).unwrap().norm() <= chain.reach() + 1e-12);
        }

        #[test]
        fn dls_exact_for_full_rank(entries in proptest::collection::vec(-1.0f64..1.0, 6), r in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let jac = DMatrix::from_row_slice(2, 3, &entries);
            prop_assume!((&jac * jac.transpose()).determinant().abs() > 1e-3);
            let dq = dls_solve(&jac, &r, 0.0).unwrap();
            let res = &jac * dq - DVector::from_column_slice(&r);
            prop_assert!(res.amax() < 1e-10);
        }
    }
}
