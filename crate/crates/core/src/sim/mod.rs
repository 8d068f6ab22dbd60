//! Synthetic scenarios and error metrics for simulation studies.

mod config;
mod generate;
mod metrics;
mod study;

pub use config::{Assignment, CovariateSpec, Family, MeanConfig, PointLaw, ProcessSpec, ProcessSpecs, ScenarioConfig, Shape};
pub use generate::{eigenfunction, fourier01, generate, legendre01, whiten, GroundTruth};
pub use metrics::{rrmse_eigenfunction, rrmse_function, rrmse_scalar, rrmse_surface, rrmse_vector};
pub use study::{run_replicate, run_study, score, ReplicateFailure, RrmseEntry, RrmseReport, StudyOptions, StudyReport};
