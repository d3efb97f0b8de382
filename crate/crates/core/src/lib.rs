//! Automatic LQR tuning with Entropy Search.
//!
//! A parameter vector `theta` sets the design weights of an LQR problem on a
//! fixed nominal model. The resulting gain is tried on a simulated inverted
//! pole, and a Gaussian process over the measured cost drives Entropy Search
//! to the next `theta`. See the guide in `book/` for a walkthrough.

pub mod artifact;
pub mod domain;
pub mod entropy;
pub mod error;
pub mod gp;
pub mod lqr;
pub mod plant;
pub mod presets;
pub mod quadrature;
pub mod tuner;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/lqr.md")]
    mod lqr {}
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/entropy_search.md")]
    mod entropy_search {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
