use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderSpec;
use crate::error::{Error, Result};

/// One named, contiguous block of θ, shaped `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector θ with named slices and AdamW moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    theta: Vec<f64>,
    slices: Vec<ParamSlice>,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    /// Optimizer steps taken, per slice (frozen slices do not advance).
    pub(crate) steps: Vec<u64>,
}

impl ParameterStore {
    /// Lays out one weight (`in × out`) and one bias (`1 × out`) slice per
    /// affine layer of every encoder, in the given order, and fills weights
    /// with Glorot-uniform draws. Biases and moments start at zero.
    pub fn init(specs: &[EncoderSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::empty();
        for spec in specs {
            spec.validate()?;
            for (layer, dims) in spec.layer_dims.windows(2).enumerate() {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                store.push_slice(EncoderSpec::weight_name(&spec.modality, layer), fan_in, fan_out, w)?;
                store.push_slice(EncoderSpec::bias_name(&spec.modality, layer), 1, fan_out, vec![0.0; fan_out])?;
            }
        }
        Ok(store)
    }

    pub fn empty() -> Self {
        ParameterStore {
            theta: Vec::new(),
            slices: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Appends a slice. Names must be unique.
    pub fn push_slice(&mut self, name: String, rows: usize, cols: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != rows * cols {
            return Err(Error::shape("push_slice", alloc::format!("{name}: {} values for {rows}x{cols}", values.len())));
        }
        if self.slices.iter().any(|s| s.name == name) {
            return Err(Error::contract("push_slice", alloc::format!("duplicate slice name {name}")));
        }
        let offset = self.theta.len();
        self.theta.extend_from_slice(&values);
        self.first_moment.resize(self.theta.len(), 0.0);
        self.second_moment.resize(self.theta.len(), 0.0);
        self.steps.push(0);
        self.slices.push(ParamSlice { name, offset, rows, cols });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn slice_index(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.slice(name).map(|s| &self.theta[s.range()])
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// Rebuilds a store from its serialized parts, checking the layout.
    pub fn from_parts(
        slices: Vec<ParamSlice>,
        theta: Vec<f64>,
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
        steps: Vec<u64>,
    ) -> Result<Self> {
        let store = ParameterStore { theta, slices, first_moment, second_moment, steps };
        store.check_layout()?;
        Ok(store)
    }

    /// Slices partition θ exactly, in order, and the buffers line up.
    pub fn check_layout(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.slices {
            if s.offset != next {
                return Err(Error::contract("ParameterStore", alloc::format!("slice {} starts at {} not {next}", s.name, s.offset)));
            }
            next += s.len();
        }
        if next != self.theta.len()
            || self.first_moment.len() != next
            || self.second_moment.len() != next
            || self.steps.len() != self.slices.len()
        {
            return Err(Error::contract("ParameterStore", "buffer lengths do not match slice layout"));
        }
        Ok(())
    }
}
