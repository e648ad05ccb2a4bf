//! Object-guided Transformer for change detection between rasterized map
//! data and optical imagery.
//!
//! The crate bundles everything needed to run the method end to end on a
//! desk-scale machine: a small autodiff tensor engine ([`tensor`]),
//! segmentation into guiding object/instance maps ([`segmentation`]), the
//! object-token attention mechanism ([`attention`]), the full network
//! ([`net`]), training objectives including the converse cross-entropy loss
//! ([`losses`]), a synthetic paired-data kit with a documented on-disk format
//! ([`data`]), evaluation metrics and complexity accounting ([`metrics`]),
//! and an experiment harness ([`harness`]).
//!
//! See the `examples/` directory for one runnable program per capability;
//! the `objformer` binary exposes the same flows as subcommands.

pub mod attention;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
