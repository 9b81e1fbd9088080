//! Horizon-stratified ICU mortality risk modelling on tabular window
//! summaries of bedside time series.

pub mod clinical;
pub mod cohort;
pub mod error;
pub mod explain;
mod linalg;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod pipeline;
pub mod temporal;
pub mod window;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cohort.md")]
    mod cohort {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/boosting.md")]
    mod boosting {}
    #[doc = include_str!("../../../book/src/shapley.md")]
    mod shapley {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/temporal.md")]
    mod temporal {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
