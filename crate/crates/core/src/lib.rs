//! Numerical workbench for viscous Lax shocks of parabolic conservation laws
//! `u_t + f(u)_x = u_xx`: profiles, Floquet spectra, spatial dynamics,
//! Green's function decomposition and nonlinear perturbation experiments.

pub mod acceptance;
pub mod error;
pub mod experiments;
pub mod floquet;
pub mod greens;
pub mod flux;
pub mod numerics;
pub mod pde;
pub mod profiles;
pub mod spatial;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
