//! Parameter-efficient fine-tuning toolkit: magnitude-based sparse masks,
//! parameter-level adapters that merge back into the base weights, the
//! usual PEFT baselines, and closed-form parameter accounting, all running
//! on a small self-contained transformer encoder.

pub mod accounting;
pub mod activation;
pub mod adapters;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use activation::Nonlinearity;
pub use adapters::{AdapterKind, AdapterPair, AdapterSpec, AdapterWeights};
pub use error::{Error, LoadError, Result};
pub use mask::{MaskPolicy, Scope, Selector, SparseMask};
pub use store::{abs_diff, ModelMeta, ParamGroup, ParameterStore, Role};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainMode, TrainOutcome, TrainReport};
