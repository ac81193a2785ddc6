//! Coarse-grained protein-ligand modeling: distogram prediction on a
//! token-level pair representation, pose reconstruction from predicted
//! distances, binding affinity heads with epistemic uncertainty, and
//! batch selection for design-make-test-analyze campaigns.

pub mod affinity;
pub mod cli;
pub mod codec;
pub mod complex;
pub mod distogram;
pub mod epinet;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pairformer;
pub mod pipeline;
pub mod pocket;
pub mod posegen;
pub mod rng;
pub mod select;
pub mod training;

pub use error::{Error, Result};
