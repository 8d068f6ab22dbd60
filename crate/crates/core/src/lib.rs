pub mod basis;
pub mod error;
pub mod fdata;
pub mod linalg;
pub mod meanfit;
pub mod covfit;
pub mod eigen;
pub mod predict;
pub mod pipeline;
pub mod sim;
pub mod cli;
