//! Prediction of the random-effect weights and curves.

mod arrow;
mod blup;
mod famm;

pub use blup::{build_blup_system, predict_eblup, predict_eblup_direct, BlupSystem, PredictMethod, PredictionResult, Weights};
pub use famm::{fit_famm, Band, FammFit, FammOptions};
