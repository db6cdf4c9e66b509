pub mod backbone;
pub mod cme;
pub mod data;
pub mod error;
pub mod hcma;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Scale};
pub use tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};
