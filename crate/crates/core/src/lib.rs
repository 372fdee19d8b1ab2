pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod dagm;
pub mod ddm;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod pom;

pub use error::{HdmError, Result};
pub use grid::{Grid, Shape};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/discrimination.md")]
    mod discrimination {}
    #[doc = include_str!("../../../book/src/probability.md")]
    mod probability {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
