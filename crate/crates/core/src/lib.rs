//! Teacher-student distillation for mask-based continuous speech separation.
//!
//! A transformer mask estimator (teacher and student share one
//! implementation) is trained with permutation invariant training, then a
//! small student learns from a large teacher through masked-signal matching,
//! layer-wise hidden-map matching, and an objective that shifts from the
//! teacher's predictions to the references over the course of training.
//! Long recordings are separated with sliding windows that are aligned and
//! stitched into continuous per-source streams.

pub mod css;
pub mod distill;
pub mod error;
pub mod eval;
pub mod mixer;
pub mod model;
pub mod perm;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
