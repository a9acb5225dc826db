//! Split fine-tuning of a small transformer between an edge device and a
//! cloud server, with an SVD rewrite of one FFN that shrinks the exchanged
//! activation from `d` to `R` columns.
//!
//! ```
//! use sft_core::decompose::{decompose_ffn, ResidualMode, SplitPlan};
//! use sft_core::nn::{build_model, ModelConfig};
//! use sft_core::splitnet::partition;
//!
//! let cfg = ModelConfig::default();
//! let plan = SplitPlan::new(3, 8, ResidualMode::Eliminated);
//! let model = decompose_ffn(&build_model(&cfg, 0)?, &plan)?;
//! let parts = partition(model, &plan)?;
//! assert_eq!(parts.net1.layers().last().unwrap().name, "ffn1.3");
//! # Ok::<(), sft_core::Error>(())
//! ```

pub mod data;
pub mod decompose;
mod error;
pub mod nn;
pub mod perfmodel;
pub mod splitnet;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};

/// The guide under `book/`, compiled so its examples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/splitting.md")]
    mod splitting {}
    #[doc = include_str!("../../../book/src/wire.md")]
    mod wire {}
    #[doc = include_str!("../../../book/src/cost_model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
}
