//! Deterministic spectral simulator for the two-species Vlasov-Poisson-Landau
//! system near a global Maxwellian, with diagnostics for projections,
//! weighted energy functionals, conservation laws and decay rates.

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod grid;
pub mod landau;
pub mod numerics;
pub mod oracle;
pub mod poisson;
pub mod state;
pub mod weights;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/collisions.md")]
    mod collisions {}
    #[doc = include_str!("../../../book/src/time_stepping.md")]
    mod time_stepping {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
