//! Pipeline for learning behavioral representations from heterogeneous
//! demonstrations: pairwise action-sequence similarity mining with DTW,
//! soft contrastive training of a small encoder, and non-parametric
//! retrieval-based control, evaluated on built-in 2D benchmark tasks.

pub mod config;
pub mod contrastive;
pub mod demo;
pub mod dtw;
pub mod encoder;
pub mod mining;
pub mod report;
pub mod retrieval;
pub mod toybench;
pub mod trainer;
