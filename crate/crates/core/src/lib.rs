//! Uncertainty-aware image segmentation with a Bayesian attention U-Net.
//!
//! The crate is self-contained: a small autodiff engine ([`tensor`]),
//! Gaussian variational convolutions trained with the Flipout estimator
//! ([`bayes`]), the U-Net with a CBAM bottleneck ([`unet`]), ELBO training
//! ([`training`]), Monte Carlo uncertainty decomposition ([`uq`]), image
//! degradations ([`degrade`]), segmentation metrics ([`metrics`]) and
//! dataset/checkpoint I/O ([`data`]).
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod bayes;
pub mod data;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod uq;

pub use error::{Error, Result};
pub use tensor::{Real, RngStream, Tape, Tensor, Var};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/variational.md")]
    mod variational {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/degradations.md")]
    mod degradations {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
