pub mod acoustic;
pub mod autograd;
pub mod corpus;
pub mod dsp;
pub mod duration;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod prosody_flow;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type AcousticModelF32 = acoustic::AcousticModel<f32>;
pub type AcousticModelF64 = acoustic::AcousticModel<f64>;
pub type DurationModelF32 = duration::DurationModel<f32>;
pub type DurationModelF64 = duration::DurationModel<f64>;
pub type ProsodyFlowF32 = prosody_flow::ProsodyFlow<f32>;
pub type ProsodyFlowF64 = prosody_flow::ProsodyFlow<f64>;
pub type ModelBundleF32 = inference::ModelBundle<f32>;
pub type ModelBundleF64 = inference::ModelBundle<f64>;
