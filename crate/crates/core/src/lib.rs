//! Simulation of runtime tensor-parallelism transformation for LLM serving.

pub mod ffn_check;
pub mod kv_layout;
pub mod model;
pub mod page_store;
pub mod ranks;
pub mod scalar;
pub mod scheduler;
pub mod sim;
pub mod transform_engine;
pub mod weight_plan;

use num_rational::Ratio;

pub use ffn_check::{Activation, DenseMatrix};
pub use model::ModelConfig;
pub use page_store::{PageRange, PageSpace, PageState};
pub use scalar::Scalar;
pub use weight_plan::PageCount;

pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type ExactMatrix = DenseMatrix<Ratio<i64>>;
