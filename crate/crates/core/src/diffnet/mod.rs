//! Differentiable per-modality encoders, the flat parameter store, the
//! reverse-accumulation tape, AdamW, and finite-difference gradient checks.

pub mod encoder;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use encoder::{encode, EncoderSpec, Nonlinearity};
pub use gradcheck::{grad_check, sample_coords};
pub use optim::AdamW;
pub use params::{ParamSlice, ParameterStore};
pub use tape::{NodeId, Op, Tape};
