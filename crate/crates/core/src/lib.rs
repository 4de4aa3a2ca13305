pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod merging;
pub mod params;
pub mod scalar;
pub mod sparse;
pub mod taskvec;
pub mod tensor;
pub mod tta;
pub mod vit;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ModuleTag, ParamTree};
pub use scalar::{Precision, Real};
pub use sparse::SparseTensor;
pub use tensor::Tensor;
pub use vit::{FeatureModel, Image, TaskHead, ViTConfig, Vit};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
