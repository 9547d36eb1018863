//! Tree extraction as graph refinement. An over-complete candidate graph
//! with Gaussian node features is pruned to a tree by mean-field inference
//! on a pairwise Markov random field. The inference iterations are unrolled
//! into a network whose shared potential parameters are learned by
//! back-propagation.
//!
//! Modules, bottom up:
//! - [`graph`]: node features, candidate graphs, beliefs, parameters, file formats
//! - [`potentials`]: node and pairwise log-potentials
//! - [`mfa`]: ELBO, coordinate updates, parallel and sequential schedules
//! - [`mfn`]: unrolled network, loss, hand-written backward pass, training
//! - [`oracle`]: brute-force references for small instances
//! - [`synth`]: synthetic trees with clutter
//! - [`eval`]: edge metrics and centerline distance
//! - [`cli`]: the `mfn-refine` command line

pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mfa;
pub mod mfn;
pub mod oracle;
pub mod potentials;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{AdjacencyEstimate, CandidateGraph, EdgeBeliefs, ModelParams, NodeFeatures};
pub use mfn::{train, TrainConfig};
pub use potentials::Mrf;
