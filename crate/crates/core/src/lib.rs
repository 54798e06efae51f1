//! Cluster-aligned, distortion-free watermarking for autoregressive token
//! streams, with baseline watermarks, a retokenization channel simulator and
//! the statistics needed to detect and audit all of them.

pub mod clustering;
pub mod detect;
pub mod error;
pub mod generate;
pub mod prf;
pub mod reweight;
pub mod simenv;
pub mod token;

pub use error::{Error, Result};
pub use token::{CodeHistory, ProbVector, TokenId, WatermarkCode, WatermarkKey};
