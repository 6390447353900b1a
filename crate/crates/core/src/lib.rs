//! Maximum-causal-entropy estimation of a human interaction model and
//! entropy-regularized optimization of a machine policy, alternated by the
//! AREA loop.

pub mod area;
pub mod error;
pub mod estimation;
pub mod features;
pub mod lca;
pub mod logspace;
pub mod machine;
pub mod process;
pub mod qlearning;
pub mod structured;
pub mod tree;

pub use error::{Error, Result};
