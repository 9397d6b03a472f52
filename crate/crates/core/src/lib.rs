pub mod error;
pub mod data;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod id_attention;
pub mod model;
pub mod numerics;
pub mod schedules;
pub mod training;

pub use error::{Error, Result};

/// Double-precision instantiations used by the CLI and tests.
pub type Tensor64 = numerics::Tensor<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type World64 = data::World<f64>;
pub type Checkpoint64 = training::Checkpoint<f64>;

/// Single-precision instantiations.
pub type Tensor32 = numerics::Tensor<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type World32 = data::World<f32>;
pub type Checkpoint32 = training::Checkpoint<f32>;
