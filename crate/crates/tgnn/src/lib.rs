//! Text classification with per-document word graphs.
//!
//! Every document becomes its own small graph: one node per token position,
//! connected to the positions within a window of `p` on either side (itself
//! included). All learnable state — word vectors, per-word-pair edge
//! weights with a shared fallback for rare pairs, per-word update gates,
//! and the classification map — lives in corpus-global tables, so unseen
//! documents are classified without touching any corpus-level structure.
//!
//! One forward pass runs `mpm_steps` rounds of gated max-reduction message
//! passing, sums the node representations, and classifies through
//! ReLU → dropout → linear → softmax. Gradients are derived by hand and
//! verified against central finite differences ([`train::gradient_check`]);
//! optimization is lazy sparse Adam with coupled L2 decay.
//!
//! The crate is a library plus a `tgnn` binary exposing `prepare`, `train`,
//! `eval`, `sweep-p`, `ablate` and `memory` subcommands.

pub mod checkpoint;
pub mod data;
pub mod edges;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod real;
pub mod train;

pub use error::{Error, Result};
