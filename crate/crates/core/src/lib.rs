//! Joint mean/dispersion modelling and robust blend optimization for mixture
//! experiments with noise variables.
//!
//! The crate fits two interlinked generalized linear models — a mean model
//! and a gamma/log dispersion model whose response is the standardized
//! deviance component of the mean fit — scores them by adjusted extended
//! quasi-likelihood, propagates the fitted conditional moments through a
//! Gaussian noise law (closed forms and a second-order delta method), and
//! solves the robust-design problem: minimize Var(Y) holding E(Y) on target
//! over a constrained mixture simplex.

pub mod dataset;
pub mod error;
pub mod glm;
pub mod jmmd;
mod linalg;
pub mod moments;
pub mod optimizer;
pub mod probstats;
pub mod terms;

pub use dataset::{ExperimentDataset, NoiseCoding, Observation};
pub use error::{Error, Result};
pub use glm::{CoefficientRow, GlmFit, GlmSpec, Link, TailReference, VarianceFunction};
pub use jmmd::{JointFit, JointModelSpec, ModelComparison};
pub use moments::{EvalMode, MomentMethod, MomentModel};
pub use optimizer::{OptimResult, RobustDesignProblem, ScenarioSpec};
pub use probstats::{GaussianNoise, SeededStream};
pub use terms::{LinearPredictorSpec, Term};
