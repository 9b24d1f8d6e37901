// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atpmodel;
pub mod augmentation;
pub mod banded;
pub mod error;
pub mod kinematics;
pub mod neuralnet;
pub mod planner;
pub mod projection;
pub mod trajectory;

pub use error::{AtpError, Result};
