pub mod backbone;
pub mod conngraph;
pub mod geom;
pub mod head;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod points;
mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vgio;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
