//! Vessel-tree generation pipeline: a VQ-VAE that turns preorder-serialized
//! binary vessel trees into codebook tokens, a decoder-only transformer that
//! models token sequences, swept-SDF meshing of decoded trees, and the
//! point-cloud and vascular evaluation metrics.

pub mod bspline;
pub mod data;
pub mod gpt;
pub mod meshing;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tree;
pub mod vqvae;

pub use data::{Corpus, SynthConfig};
pub use gpt::{Gpt, GptConfig, SamplerConfig, TokenSequence};
pub use meshing::TriMesh;
pub use metrics::MetricReport;
pub use tensor::{Tape, Tensor, Var};
pub use tree::{VesselNode, VesselTree};
pub use vqvae::{VqConfig, VqVae};
