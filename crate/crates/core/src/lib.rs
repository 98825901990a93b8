pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod mssvm;
pub mod pool;
pub mod rng;
pub mod strategies;
pub mod synth;
pub mod versionspace;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pools.md")]
    mod pools {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/version-space.md")]
    mod version_space {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
