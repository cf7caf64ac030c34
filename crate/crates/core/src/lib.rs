//! Certainty-equivalence adaptive LQ control built on a data-driven Riccati
//! equation, with closed-loop simulation and numerical robustness
//! certificates.

pub mod error;
pub mod linalg;
pub mod riccati;
pub mod data;
pub mod adaptive;
pub mod sim;
pub mod certificates;
pub mod instances;
pub mod cli;

pub use error::{Error, Result};
