//! Coarse-to-fine localization of natural-language queries in instance-level
//! point-cloud maps. The crate provides a reverse-mode tape over dense f64
//! matrices, three scene descriptor branches (hyperbolic instance attention,
//! symplectic relation encoding, spectral global encoding), repulsion-only
//! contrastive alignment, and the training / retrieval pipeline built on top.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod hyperbolic;
pub mod losses;
pub mod model;
pub mod reference;
pub mod relation;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod tolerances;

pub use tape::{Tape, TapeError, TapeResult, ValueId};
pub use tensor::Tensor;
