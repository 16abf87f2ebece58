//! Change State Space Model (CSSM): a dual-input selective state-space
//! recurrence for bi-temporal change detection, with a minimal autodiff
//! tensor core, synthetic data generation, training/evaluation tooling, and
//! a CLI.

pub mod block;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
