pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Tensor32 = nn::Tensor4<f32>;
pub type Tensor64 = nn::Tensor4<f64>;
pub type Frontend32 = frontend::Frontend<f32>;
pub type Frontend64 = frontend::Frontend<f64>;
pub type MelSpec32 = frontend::MelSpec<f32>;
pub type MelSpec64 = frontend::MelSpec<f64>;
