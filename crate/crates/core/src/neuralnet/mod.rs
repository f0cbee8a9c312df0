//! Dense feed-forward networks written from scratch: MLP classifiers and
//! autoencoders with ELU hidden layers, BCE/MSE losses with L2, reverse-mode
//! gradients and plain SGD over a flat parameter vector.

pub mod arch;
pub mod checkpoint;
pub mod engine;

pub use arch::{ArchitectureSpec, LayerLayout, ModelKind, Preset};
pub use engine::{
    backward, elu, forward, init_model, l2_penalty, loss, loss_and_gradient, mse_per_sample,
    predict_labels, sgd_step, sigmoid, Batch, Matrix, ModelParameters,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Regularisation strengths searched by the preset grid.
    pub const L2_GRID: [f64; 3] = [0.0, 1e-5, 1e-4];

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(crate::Error::config("learning_rate must be positive"));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(crate::Error::config("l2_lambda must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(crate::Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}
