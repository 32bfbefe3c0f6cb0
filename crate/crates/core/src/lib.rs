//! Fixed-point sparse Gaussian process models of stochastic transition maps,
//! fitted by assumed density filtering, and empirical bifurcation analysis.

pub mod ad;
pub mod adf;
pub mod belief;
pub mod bifurcation;
pub mod error;
pub mod fpsgp;
pub mod io;
pub mod kernels;
pub mod learn;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod sgp;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mat = linalg::Mat<f64>;
pub type GaussianBelief = belief::GaussianBelief<f64>;
pub type KernelHyperparams = kernels::KernelHyperparams<f64>;
pub type InducingSet = sgp::InducingSet<f64>;
pub type FixedPointSet = fpsgp::FixedPointSet<f64>;
pub type TransitionModel = fpsgp::TransitionModel<f64>;
pub type ObservationModel = adf::ObservationModel<f64>;
pub type LatentInit = adf::LatentInit<f64>;
pub type StateSpaceModel = learn::StateSpaceModel<f64>;
pub use adf::{Trial, TrajectoryDataset};
pub use learn::{fit, FitConfig, FitResult, ParameterVector};
