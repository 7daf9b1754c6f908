//! Class-incremental learning over a modular network whose training paths
//! are sampled at random and switched once they saturate.

pub mod autodiff;
pub mod data;
pub mod model;
pub mod objective;
pub mod optim;
pub mod path;
pub mod saturation;
pub mod tensor;
pub mod trainer;
pub mod harness;
