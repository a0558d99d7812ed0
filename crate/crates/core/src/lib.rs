//! Binding modalities that never co-occur in one dataset.
//!
//! Two (or three) datasets share a pivot modality but each lacks a target
//! modality. Per minibatch, pseudo embeddings for the missing modality are
//! extrapolated through pseudo-inverse transition matrices over the pivot
//! embeddings, then contrasted against the modalities that are present. The
//! encoders are trained with a CLIP-style loss plus cross-modal and cross-data
//! symmetry penalties.
//!
//! The crate is `no_std` (with `alloc`). File formats, config parsing and the
//! command line live in the companion `brokenbind` crate.
//!
//! Module map:
//!
//! - [`linalg`]: dense `f64` matrices, SVD, Moore–Penrose pseudo-inverse.
//! - [`diffnet`]: encoders, parameter store, reverse-accumulation tape, AdamW.
//! - [`xtrap`]: interpolation, multi-extrapolation, transition matrices and
//!   pseudo embeddings (two- and three-dataset).
//! - [`losses`]: CLIP with cross-dataset repulsion, symmetry losses, MOX.
//! - [`synthgen`]: synthetic latent-variable datasets with distribution shift.
//! - [`trainer`]: the training loop and its schedules.
//! - [`eval`]: retrieval mAP, extrapolation fidelity, PCA projection, ablations.

#![no_std]

extern crate alloc;

pub mod diffnet;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod synthgen;
pub mod trainer;
pub mod xtrap;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Identifier of one modality (for example `"te"`, `"vi"`, `"ta"`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub alloc::string::String);

impl ModalityId {
    pub fn new(name: &str) -> Self {
        ModalityId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModalityId {
    fn from(s: &str) -> Self {
        ModalityId::new(s)
    }
}

/// Identifier of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct DatasetId(pub alloc::string::String);

impl DatasetId {
    pub fn new(name: &str) -> Self {
        DatasetId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        DatasetId::new(s)
    }
}
