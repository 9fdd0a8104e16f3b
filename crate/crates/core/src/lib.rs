//! Logarithmic (power-of-two) tensor quantization toolkit.
//!
//! Provides nearest-center log quantization with per-tensor scales (fixed,
//! max-based, or EM-fitted), bit-packed model containers with full-precision
//! bias passthrough, exact shift-add quantized dot products with a
//! straight-through-estimator backward pass, and an error-feedback
//! retraining loop demonstrated on a built-in toy regression task.

pub mod codec;
pub mod container;
pub mod error;
pub mod qdot;
pub mod retrain;
pub mod scale;
pub mod tensor;
pub(crate) mod wide;

pub use codec::{
    decode, encode, linear_encode, nearest_pow2_exponent, quantization_sse, LinearQuantized,
    QuantConfig, QuantizedTensor, ScaleStrategy,
};
pub use container::{dequantize_model, read_model, write_model, CompressionReport, ModelContainer};
pub use error::{Error, Result};
pub use qdot::{
    qdot_reference, qdot_shift, quantize_activations, ste_backward, ActQuantConfig, ActScaleMode,
    QDotResult,
};
pub use retrain::{
    gen_synthetic_task, quantize_then_eval, retrain, RetrainOutcome, StepMetrics, SyntheticTask,
    ToyModel, TrainConfig, TrainState,
};
pub use scale::{em_fit_scale, max_scale, refit_scale, ScaleFitReport};
pub use tensor::{tensor_stats, Tensor, TensorArchive, TensorStats};
