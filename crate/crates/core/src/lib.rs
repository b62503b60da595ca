//! Multi-scale vehicle re-identification.
//!
//! * [`ndgrad`]: dense tensors with reverse-mode differentiation.
//! * [`backbone`]: the per-scale convolutional feature extractor.
//! * [`model`]: scale branches, fusion classifier, consensus-feedback losses,
//!   training and descriptor extraction.
//! * [`pyramid`]: images, resizing, augmentation and pyramid construction.
//! * [`datakit`]: manifests, trajectory filtering, benchmark splits and the
//!   synthetic vehicle generator.
//! * [`evalkit`]: L2 ranking, CMC, mAP and report emission.
//! * [`cli`]: the `msvr` command-line pipeline.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ndgrad;

pub use error::{Error, Result};
pub mod backbone;
pub mod cli;
pub mod datakit;
pub mod evalkit;
pub mod model;
pub mod pyramid;

/// The guide's chapters, compiled so that their snippets run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/pyramid-and-backbone.md")]
    pub struct PyramidAndBackbone;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
}
