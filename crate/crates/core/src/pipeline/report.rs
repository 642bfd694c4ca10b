use super::format::CompressedModel;
use super::train::TrainedModel;
use super::PipelineError;
use crate::cli_io::Dataset;
use crate::nn::{argmax_rows, mlp_apply, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub accuracy: f64,
    pub error: f64,
}

/// Top-1 accuracy of the network with `weights` on `data`.
pub fn evaluate(spec: &ModelSpec, weights: &[f64], data: &Dataset) -> Result<Score, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptyData);
    }
    let logits = mlp_apply(spec, weights, &data.inputs)?;
    let hits = argmax_rows(&logits).iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    let accuracy = hits as f64 / data.len() as f64;
    Ok(Score { accuracy, error: 1.0 - accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderAccounting {
    Include,
    Exclude,
}

/// `original_param_count * bits_per_param / (payload bits [+ header bits])`.
pub fn compression_ratio(
    original_param_count: usize,
    bits_per_param: u32,
    cm: &CompressedModel,
    header: HeaderAccounting,
) -> f64 {
    let header_bits = match header {
        HeaderAccounting::Include => 8 * cm.header_bytes(),
        HeaderAccounting::Exclude => 0,
    };
    (original_param_count as f64 * bits_per_param as f64) / (cm.payload_bits() + header_bits) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramRow {
    pub layer: usize,
    pub mean: f64,
    pub log_std: f64,
}

/// One row per weight-matrix entry with its posterior mean and log standard
/// deviation; Mean-KL parameters are converted first.
pub fn export_histograms(model: &TrainedModel) -> Result<Vec<HistogramRow>, PipelineError> {
    let q = model.posterior_gaussian()?;
    let layer_of = model.spec.layer_of_param();
    Ok(model
        .spec
        .weight_mask()
        .iter()
        .enumerate()
        .filter(|(_, &is_weight)| is_weight)
        .map(|(i, _)| HistogramRow { layer: layer_of[i], mean: q.means[i], log_std: q.log_stds[i] })
        .collect())
}
