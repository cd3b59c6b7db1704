//! Normalizing flows trained as energy-based models.
//!
//! A flow's log-density splits into an unnormalized energy, which holds the
//! non-linear layers' Jacobian terms, and a log-normalizer, which holds the
//! linear layers' determinants. Score-matching objectives only need the
//! energy, so training them never factorizes a weight matrix.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use layers::{FlowLayer, LayerKind, LayerSet};
pub use model::{Bound, EnergyReport, FlowModel};
pub use tensor::Tensor;
