//! Lossless coding of voxelized point-cloud geometry with a multiscale,
//! group-parallel deep context model.
//!
//! A cloud is split into a raw high-level octree plus dense leaf blocks
//! ([`octree`]). Each block is max-pooled into a resolution pyramid
//! ([`blocks`]); the coarsest level is coded voxel by voxel with a causal
//! masked-convolution model, and every finer level is coded as eight corner
//! groups, each predicted in a single network evaluation ([`models`]). The
//! predicted probabilities drive a binary arithmetic coder ([`entropy`]) and
//! [`codec`] ties the pieces into a bitstream.

pub mod blocks;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod models;
pub mod octree;
pub mod pc_io;
pub mod tensor;

pub use error::{Error, Result};
