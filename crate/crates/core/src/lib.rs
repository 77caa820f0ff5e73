//! Layer-specific continual pretraining on a desk-scale decoder LM.
//!
//! A full decoder model is trained cheaply by detaching its embedding, head
//! and a few selected layers into a small standalone model, training only the
//! selected layers, writing them back, and briefly fine-tuning the whole
//! model to realign it. Full fine-tuning and LoRA are provided as baselines,
//! together with FLOP/wall-clock benchmarking, parameter-delta (chat vector)
//! arithmetic, synthetic bilingual data, and a checkpoint format.

pub mod data;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{EloError, Result};
pub use model::{DecoderModel, ModelConfig, ParamScope};
