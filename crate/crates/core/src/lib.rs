pub mod autodiff;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod lipschitz;
pub mod loss;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod tfl;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
