use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{EmbeddingMatrix, Matrix};
use crate::ModalityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

/// Per-modality MLP: affine layers with a nonlinearity between them, then
/// unit row normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: ModalityId,
    /// Widths from raw input to embedding dimension; at least two entries.
    pub layer_dims: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    /// Multiplies this modality's similarities before division by τ.
    pub temperature_scale: f64,
}

impl EncoderSpec {
    pub fn new(modality: ModalityId, layer_dims: Vec<usize>, nonlinearity: Nonlinearity) -> Self {
        EncoderSpec { modality, layer_dims, nonlinearity, temperature_scale: 1.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(alloc::format!(
                "encoder {}: layer_dims needs an input and an output width",
                self.modality
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config(alloc::format!("encoder {}: zero-width layer", self.modality)));
        }
        if !(self.temperature_scale > 0.0 && self.temperature_scale.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "encoder {}: temperature_scale must be positive, got {}",
                self.modality, self.temperature_scale
            )));
        }
        Ok(())
    }

    pub fn weight_name(modality: &ModalityId, layer: usize) -> String {
        alloc::format!("{modality}.l{layer}.weight")
    }

    pub fn bias_name(modality: &ModalityId, layer: usize) -> String {
        alloc::format!("{modality}.l{layer}.bias")
    }

    /// Records the encoder on `tape` applied to `input`.
    pub fn record(&self, tape: &mut Tape, store: &ParameterStore, input: NodeId) -> Result<NodeId> {
        let cols = tape.value(input).cols();
        if cols != self.input_dim() {
            return Err(Error::shape(
                "encode",
                alloc::format!("encoder {} expects {} input columns, got {cols}", self.modality, self.input_dim()),
            ));
        }
        let mut h = input;
        for layer in 0..self.num_layers() {
            let w = param_node(tape, store, &Self::weight_name(&self.modality, layer))?;
            let b = param_node(tape, store, &Self::bias_name(&self.modality, layer))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if layer + 1 < self.num_layers() {
                h = match self.nonlinearity {
                    Nonlinearity::Tanh => tape.tanh(h)?,
                    Nonlinearity::Relu => tape.relu(h)?,
                };
            }
        }
        tape.normalize_rows(h).map_err(|e| match e {
            Error::DegenerateEmbedding { row, .. } => {
                Error::DegenerateEmbedding { modality: String::from(self.modality.as_str()), row }
            }
            other => other,
        })
    }
}

fn param_node(tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<NodeId> {
    let s = store
        .slice(name)
        .ok_or_else(|| Error::contract("encode", alloc::format!("parameter store has no slice {name}")))?;
    Ok(tape.param(store.theta(), s.offset, s.rows, s.cols))
}

/// Encodes `raw` (B × input_dim) to unit-norm embeddings without keeping the
/// computation record.
pub fn encode(spec: &EncoderSpec, store: &ParameterStore, raw: &Matrix) -> Result<EmbeddingMatrix> {
    let mut tape = Tape::new();
    let x = tape.input(raw.clone());
    let out = spec.record(&mut tape, store, x)?;
    Ok(EmbeddingMatrix::from_normalized_unchecked(tape.value(out).clone()))
}
