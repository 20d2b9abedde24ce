//! Graph neural networks built on multi-hop diffusion within a single
//! layer: each layer propagates features through powers of a normalized
//! transition matrix and recombines the hop representations with a
//! per-node attention profile, so receptive-field radius is decoupled
//! from network depth.
//!
//! The crate is self-contained: a tape-based reverse-mode gradient engine
//! over dense row-major tensors ([`tensor`], [`ops`]), sparse CSR graphs
//! and transition matrices ([`graph`], [`transition`]), the diffusion
//! layer and full model ([`layer`], [`model`]), full-batch training
//! ([`train`]), dataset ingestion and a stochastic-block-model generator
//! ([`data`]), and an independent dense-arithmetic oracle suite used to
//! cross-check gradients, diffusion algebra, and spectral identities
//! ([`oracle`], [`verify`]).
//!
//! Start with the runnable programs under `examples/`, or the `agdn`
//! binary (`ingest`, `synth`, `train`, `eval`, `verify`).

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layer;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod transition;
pub mod verify;

pub use error::{Error, Result};
