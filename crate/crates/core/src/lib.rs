//! Multi-modal object re-identification with segmentation-guided attention
//! modulation, semantic token reallocation and cross-modal hypergraph
//! interaction, on a small from-scratch autodiff engine.

pub mod chi;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod harness;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod reallocation;
pub mod rng;
pub mod sfm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Graph, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Tensor};
