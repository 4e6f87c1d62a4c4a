//! Cross-layer attention network on a from-scratch autodiff tensor core.
//!
//! The crate builds up in layers: `tensor` provides dense arrays with
//! reverse-mode differentiation, `attention` implements the cross-layer
//! context and spatial attention modules, `backbone` and `model` assemble
//! the multi-branch classifier, `data` generates the synthetic fine-grained
//! task, and `train`/`cli` drive it all from a plain-text run config.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod init;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{ClanError, Result};
pub use tensor::{Element, Tensor};
