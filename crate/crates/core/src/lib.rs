pub mod architectures;
pub mod autograd;
pub mod blocks;
pub mod cascade;
pub mod config;
pub mod error;
pub mod metrics;
pub mod params;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod volume;

pub use architectures::{Network, NetworkSpec};
pub use autograd::{Graph, Var};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use params::{Binder, Bindings, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use volume::{Mask, Volume};
