pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numfmt;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, MtDnn};
pub use params::{ParamId, ParamStore};
pub use task::{Metric, TaskKind, TaskSpec};
pub use tensor::{Graph, Tensor, Var};
