pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod inference;
pub mod losses;
pub mod models;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod wavelet;
