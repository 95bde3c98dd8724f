//! Visually grounded embeddings for spoken captions.
//!
//! Speech is turned into MFCC frames, encoded by a strided convolution, a stack
//! of bidirectional GRUs and vectorial self-attention, and projected into a
//! joint space with images. Training uses a bidirectional hinge ranking loss
//! over the hardest in-batch negatives, Adam with a cosine-cyclic learning
//! rate, and snapshot ensembling. Word-presence probes measure what each
//! encoder layer knows about the words in a caption.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod objective;
pub mod pipeline;
pub mod probe;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};

/// Version string embedded in every report and sidecar.
pub const TOOL_VERSION: &str = concat!("s2i ", env!("CARGO_PKG_VERSION"));
