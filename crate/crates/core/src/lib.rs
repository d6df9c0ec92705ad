//! Enhancement of hyperintense lesions in FLAIR MRI volumes, white-matter
//! mask estimation from the resulting hyperintensity map, and the metrics
//! used to evaluate both.
//!
//! The processing chain is: [`preprocess::nlm_denoise`] →
//! [`preprocess::normalize_intensity`] → [`preprocess::sobel_magnitude`] →
//! [`preprocess::build_intermediate`] → [`himap::score_map`] →
//! [`wmmask::estimate_wm`]. [`pipeline::run_pipeline`] wires the stages to
//! files on disk.

// Parameter checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod himap;
pub mod metrics;
pub mod nifti;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod volume;
pub mod wmmask;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Dims, MaskedStats, Volume3D};
