pub mod cli;
pub mod conditioning;
pub mod data_io;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod sci;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

/// Guide chapters compiled as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub mod schedule {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    pub mod conditioning {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    pub mod denoiser {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub mod sampling {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
