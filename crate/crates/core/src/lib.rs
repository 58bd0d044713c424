//! Estimation and inference for causal ANOVA explainability: how much of the
//! outcome variance each randomized factor, union of factors, or pairwise
//! interaction causally accounts for.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`] and [`estimand`]: datasets, schemas and the algebra that writes
//!   every estimand as a signed sum of building blocks `E[E[Y | W_{-S}]^2] / Var(Y)`;
//! * [`nuisance`]: cross-fitted regression surfaces and marginal estimates;
//! * [`estimators`]: plug-in and one-step estimators with cross-fitting;
//! * [`inference`]: randomization tests, confidence intervals, the sequential
//!   procedure and hierarchical screening;
//! * [`simulation`]: data generators, exact oracles and a study harness.

pub mod data;
pub mod error;
pub mod estimand;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod seed;
pub mod simulation;

pub use data::{validate_dataset, Dataset, Factor, FactorKind, RawTable, Schema};
pub use error::{Error, Result};
pub use estimand::{
    expand_estimand, BuildingBlock, EstimandSpec, FactorSet, SignedBlockCombination,
};
pub use estimators::{one_step_estimate, plugin_estimate, EstimateReport, Method};
pub use nuisance::{make_fold_plan, FoldPlan, LearnerConfig, NuisanceFit};
