//! Variational training under the Mean-Var and Mean-KL parameterizations,
//! the blockwise compress-and-fine-tune schedule, and the artefacts it
//! produces.

mod compress;
mod format;
mod objective;
mod report;
mod train;

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::gaussian::GaussianError;
use crate::lambert_w::Evaluation;
use crate::nn::ModelError;
use crate::rec_codec::CodecError;

pub use compress::{compress_model, decompress_model, CompressionOutcome};
pub use objective::objective_gradient_error;
pub use format::{CodingParams, CompressedModel, FormatError, FORMAT_VERSION, MAGIC};
pub use report::{compression_ratio, evaluate, export_histograms, HeaderAccounting, HistogramRow, Score};
pub use train::{anneal_beta, resume, train, Posterior, TraceRecord, TrainTrace, TrainedModel};

/// A block may be encoded under Mean-Var once its KL is within this many
/// nats of the budget.
pub const GATE_SLACK_NATS: f64 = 0.1;

/// Initial layerwise coding log standard deviation.
pub const CODING_LOG_STD_INIT: f64 = -2.0;

/// Initial Mean-Var posterior log standard deviation.
pub const MEANVAR_LOG_STD_INIT: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    MeanVar,
    MeanKL,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::MeanVar => "mean-var",
            Parameterization::MeanKL => "mean-kl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub budget_bits_per_block: u32,
    pub block_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eps_beta0: f64,
    pub eps_beta: f64,
    pub finetune_steps: usize,
    pub seed: u64,
    pub parameterization: Parameterization,
    pub lambert: Evaluation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget_bits_per_block: 20,
            block_size: 20,
            learning_rate: 0.001,
            batch_size: 200,
            max_iters: 10_000,
            eps_beta0: 1e-8,
            eps_beta: 5e-5,
            finetune_steps: 100,
            seed: 0,
            parameterization: Parameterization::MeanKL,
            lambert: Evaluation::Refined,
        }
    }
}

impl TrainConfig {
    /// Per-block budget in nats.
    pub fn budget_nats(&self) -> f64 {
        self.budget_bits_per_block as f64 * LN_2
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |what: &'static str| Err(PipelineError::Config(what));
        if self.budget_bits_per_block == 0 {
            return bad("budget_bits_per_block must be positive");
        }
        if self.block_size == 0 {
            return bad("block_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.eps_beta0 > 0.0) || !(self.eps_beta > 0.0) {
            return bad("annealing constants must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("training data is empty")]
    EmptyData,
    #[error("data has {found} features, model expects {expected}")]
    DataShape { expected: usize, found: usize },
    #[error("loss became non-finite at iteration {iter}")]
    Diverged { iter: u64, trace: Box<TrainTrace> },
    #[error("block {block} still has KL {kl:.4} nats against a budget of {budget:.4} after {iters} annealing steps")]
    OverBudget { block: usize, kl: f64, budget: f64, iters: usize },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
