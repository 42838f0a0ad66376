//! Cluster-conditioned neuron identification and protected structured
//! pruning for Transformer feed-forward layers.
//!
//! Pipeline: binarize frame activations ([`binarize`]), cluster frames and
//! utterance embeddings ([`clustering`]), identify neurons tied to the
//! clusters ([`neuron_id`]), and prune FFN hidden dims while protecting them
//! ([`pruning`]). [`synth`] generates planted-neuron datasets for end-to-end
//! checks.

pub mod binarize;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod io_util;
pub mod neuron_id;
pub mod npy;
pub mod pipeline;
pub mod pruning;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};
