//! Purchase-intention aware query-to-product retrieval.
//!
//! This crate holds the algorithmic core: a small reverse-mode autodiff
//! tape, the toy text/image encoders with their projectors, the intent
//! codebook trained by reward-based competitive learning, both training
//! stages, the granular feature store, top-k retrieval (full scan and
//! intent-clustered) and the evaluation metrics. It is `no_std` and only
//! needs `alloc`; file formats, timing and the command line live in the
//! `pincer` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codebook;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod diff;
pub mod encoders;
mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod stage1;
pub mod stage2;

pub use error::{Error, ErrorCategory, Result};

/// Identifier of a catalog product. Ordering is used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ProductId(pub u32);

impl core::fmt::Display for ProductId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}
