//! Physics-informed conditional Karhunen-Loeve inversion for steady diffusion
//! with a log-diffusion field `y` and state `u` on the unit square.

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fieldgen;
pub mod fv;
pub mod gpr;
pub mod grid;
pub mod kernels;
pub mod kle;
pub mod latent;
pub mod map;
pub mod optim;
pub mod pickle;
pub mod random;

/// Version of this crate, recorded in experiment provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use fv::{BoundaryValues, ResidualOperator, SparseRows};
pub use gpr::{condition, fit_hyperparameters, log_marginal_likelihood, FitOptions, GaussianFieldModel, ObservationSet};
pub use grid::{Grid, Point};
pub use kernels::{KernelFamily, KernelSpec};
pub use kle::{decompose, Ckle, Truncation};
pub use ensemble::{build_u_ckle, build_u_model, EnsembleConfig};
pub use fieldgen::{generate_reference, relative_lp_error, sample_observations};
pub use latent::{classify_latent, invert_binary, BinaryFieldSpec};
pub use map::{map_invert, MapConfig, MapResult};
pub use pickle::{invert, objective_and_gradient, InversionConfig, InversionResult, Optimizer, ParamMap};
