//! Architecture watermarking for cell-based NAS models.
//!
//! A watermark is a stamp: a dependent path of fixed edge/operation pairs that
//! every searched cell must contain. Ownership is checked by simulating (or
//! importing) the itcopy/oncopy access trace a blocked GEMM leaks during
//! inference, recovering the per-cell operation sequence and matching the
//! verification key against it.

pub mod analysis;
pub mod attacks;
pub mod cli;
pub mod error;
pub mod machine;
pub mod nas;
pub mod report;
pub mod search;
pub mod trace;
pub mod uniqueness;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
