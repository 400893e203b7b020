//! A small dense-tensor engine: channels-last volumes, masked 3D
//! convolution, a reverse-mode tape and Adam.
//!
//! Volumes are stored as `[depth, height, width, channels]` in row-major
//! order, so the channel vector of one voxel is contiguous.

mod adam;
mod conv;
mod layers;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv3d, conv_voxel, make_mask, ConvBackend, ConvGeometry, ConvSpec, MaskKind};
pub use layers::{Conv3d, ConvVars, ResBlock, ResBlockVars};
pub use tape::{GradTape, Gradients, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 5 {
            return Err(Error::ShapeMismatch(format!(
                "at most 5 axes supported, got {}",
                shape.len()
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Independent normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = if std > 0.0 {
            let normal = Normal::new(0.0f32, std).expect("positive std");
            (0..len).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; len]
        };
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial dims and channel count of a `[D, H, W, C]` volume.
    pub fn volume_dims(&self) -> Result<([usize; 3], usize)> {
        match self.shape[..] {
            [d, h, w, c] => Ok(([d, h, w], c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a [D, H, W, C] volume, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub(crate) fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

#[inline]
pub(crate) fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Logits are clamped before the sigmoid so every coded symbol keeps a
/// bounded cost.
pub const LOGIT_CLAMP: f32 = 15.0;

#[inline]
pub fn clamped_sigmoid(logit: f32) -> f32 {
    let z = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}
