//! Reference implementations used only by tests. Everything here is written
//! independently of the main crate: direct transcriptions of the defining
//! formulas, brute-force geometry, finite differences. Slow is fine.

pub mod contrastive;
pub mod eigen;
pub mod findiff;
pub mod softmax;
pub mod warp;
