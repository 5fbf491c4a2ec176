//! The guide chapters, compiled as doc-tests.
//!
//! Each module wraps one chapter of the mdbook under `book/`, so every
//! code block in the guide is checked by `cargo test`. The rendered book
//! is the place to read them; this module only keeps it honest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/item-graphs.md")]
pub mod item_graphs {}

#[doc = include_str!("../../../book/src/graph-auto-encoder.md")]
pub mod graph_auto_encoder {}

#[doc = include_str!("../../../book/src/relation-pruning.md")]
pub mod relation_pruning {}

#[doc = include_str!("../../../book/src/contrastive-pretraining.md")]
pub mod contrastive_pretraining {}

#[doc = include_str!("../../../book/src/product-bundling.md")]
pub mod product_bundling {}

#[doc = include_str!("../../../book/src/synthetic-benchmark.md")]
pub mod synthetic_benchmark {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
