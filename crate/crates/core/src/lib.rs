pub mod artifacts;
pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod intent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod slot;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
