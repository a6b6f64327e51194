//! Masked-autoencoder imputation for panel-structured lab data, with the
//! classical baselines it is compared against, the evaluation protocol, and
//! energy accounting. The guide lives in `book/`.

pub mod baselines;
pub mod carbon;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/layout.md")]
    mod layout {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/carbon.md")]
    mod carbon {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
