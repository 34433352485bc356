//! Source-free domain adaptation with centroid-hypothesis conflict
//! reconciliation (RCHC) on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod pseudo_label;
pub mod training;

pub use error::{Error, Result};

/// Nine significant digits in scientific notation, e.g. `6.50000000e-1`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.8e}")
}
