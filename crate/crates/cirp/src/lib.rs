//! Relational pre-training for item representations, at desk scale.
//!
//! The pipeline turns a purchase log into complementarity-aware item
//! embeddings in five stages:
//!
//! 1. [`graph`] builds an undirected co-purchase graph from timestamped
//!    interactions.
//! 2. [`gae`] trains a lightweight graph auto-encoder on that graph with a
//!    pairwise ranking loss, scoring how well each edge is supported.
//! 3. [`prune`] removes the lowest-scored fraction of each item's edges,
//!    keeping the relations worth learning from.
//! 4. [`encoder`] pre-trains dual modality encoders with contrastive
//!    objectives: items against their own modalities, and against their
//!    surviving graph neighbors.
//! 5. [`bundling`] evaluates the embeddings on product-bundle completion
//!    with nearest-neighbor ranking.
//!
//! Everything is deterministic for a fixed seed: single-threaded, f64
//! arithmetic internally, and a portable counter-based RNG. The [`pipeline`]
//! module wires the stages to files on disk; the `cirp` binary exposes them
//! as subcommands.

pub mod bundling;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gae;
pub mod graph;
pub mod linalg;
pub mod pipeline;
pub mod prune;

pub mod book;

pub use error::{CirpError, Result};
