//! Multivariate-response scalar-on-function regression.
//!
//! Responses `Y ∈ ℝ^m` are modelled as `μ + ∫ X(t)ᵀ B(t) dt + ε` with
//! `p` predictor curves `X(t)`. The coefficient surface `B` is estimated
//! through a rank-K decomposition `Σ_k α_k(t) w_kᵀ` whose components solve
//! a sequence of penalized generalized eigenproblems.

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod design;
pub mod eigensolver;
pub mod error;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod simgen;

pub use basis::{make_basis, BasisSpec};
pub use design::{build_design, CurveDataset, DesignMatrices, Truth};
pub use eigensolver::{ComponentSet, PenaltyConfig, PenaltyMode};
pub use error::{Error, Result};
pub use model::{FittedModel, KRule};
pub use selection::{CvGrid, CvResult};
pub use simgen::SimScenario;
