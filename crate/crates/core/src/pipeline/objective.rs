//! Training objectives as static graphs over one flat parameter vector
//! `theta = a ⊕ b ⊕ log_rho`.
//!
//! Mean-Var: `a = mu`, `b = log sigma`. Mean-KL: `a = tau`, `b` = quota
//! logits. `log_rho` holds one coding log standard deviation per layer; the
//! coding mean is fixed at zero.

use std::sync::Arc;

use crate::autodiff::{finite_diff_check, AutodiffError, Bindings, Graph, NodeId, Segments, Tensor};
use crate::nn::{build_mlp, ModelSpec};
use crate::rec_codec::BlockSpec;

use super::{Parameterization, PipelineError, TrainConfig, TrainedModel};

pub(crate) struct Objective {
    pub graph: Graph,
    pub theta: NodeId,
    pub x: NodeId,
    pub y: NodeId,
    pub noise: NodeId,
    pub mask: NodeId,
    pub fixed: NodeId,
    pub beta: Option<NodeId>,
    pub kl_blocks: Option<NodeId>,
    pub ce: NodeId,
    pub loss: NodeId,
    pub mean: NodeId,
    pub std: NodeId,
}

pub(crate) fn segments(blocks: &BlockSpec) -> Segments {
    Arc::from(blocks.blocks.clone())
}

/// Builds the objective for a `batch x input_dim` minibatch drawn from a
/// dataset of `n_data` examples.
///
/// The network sees `mask * (mean + std * noise) + fixed`, so blocks that
/// have already been coded enter as constants through `fixed`.
pub(crate) fn build(
    spec: &ModelSpec,
    blocks: &BlockSpec,
    cfg: &TrainConfig,
    batch: usize,
    n_data: usize,
) -> Result<Objective, PipelineError> {
    let n = spec.param_count();
    let layers = spec.layers.len();
    let mut g = Graph::new();
    let theta = g.param("theta", vec![2 * n + layers]);
    let x = g.input("x", vec![batch, spec.input_dim()]);
    let y = g.input("y", vec![batch]);
    let noise = g.input("noise", vec![n]);
    let mask = g.input("mask", vec![n]);
    let fixed = g.input("fixed", vec![n]);

    let a = g.slice(theta, 0, vec![n])?;
    let b = g.slice(theta, n, vec![n])?;
    let log_rho = g.slice(theta, 2 * n, vec![layers])?;
    let layer_of: Arc<[usize]> = Arc::from(spec.layer_of_param());
    let log_rho_w = g.gather(log_rho, layer_of)?;
    let segs = segments(blocks);

    let (mean, std) = match cfg.parameterization {
        Parameterization::MeanVar => (a, g.exp(b)),
        Parameterization::MeanKL => mean_kl_moments(&mut g, a, b, log_rho_w, segs.clone(), cfg)?,
    };

    let scaled = g.mul(std, noise)?;
    let sample = g.add(mean, scaled)?;
    let kept = g.mul(sample, mask)?;
    let w = g.add(kept, fixed)?;
    let logits = build_mlp(&mut g, spec, w, x)?;
    let ce = g.cross_entropy(logits, y)?;

    let (beta, kl_blocks, loss) = match cfg.parameterization {
        Parameterization::MeanVar => {
            let kl_w = mean_var_kl(&mut g, a, b, std, log_rho_w)?;
            let kl_blocks = g.segment_sum(kl_w, segs)?;
            let beta = g.input("beta", vec![blocks.len()]);
            let weighted = g.dot(kl_blocks, beta)?;
            // Σ_data CE + Σ_b β_b KL_b, divided through by the dataset size
            let penalty = g.scale(weighted, 1.0 / n_data as f64);
            (Some(beta), Some(kl_blocks), g.add(ce, penalty)?)
        }
        Parameterization::MeanKL => (None, None, ce),
    };

    Ok(Objective { graph: g, theta, x, y, noise, mask, fixed, beta, kl_blocks, ce, loss, mean, std })
}

/// Worst relative error between the analytic gradient of the loss with
/// respect to `theta` and central differences with step `h`, for a fixed
/// minibatch `x`, labels `y` and noise draw. Every block is live and β is
/// taken from `model`.
pub fn objective_gradient_error(
    model: &TrainedModel,
    theta: &[f64],
    x: Tensor,
    y: &[usize],
    noise: &[f64],
    n_data: usize,
    h: f64,
) -> Result<f64, PipelineError> {
    let n = model.param_count();
    let features = x.shape().last().copied().unwrap_or(0);
    if features != model.spec.input_dim() {
        return Err(PipelineError::DataShape { expected: model.spec.input_dim(), found: features });
    }
    let mut obj = build(&model.spec, &model.blocks, &model.config, y.len(), n_data)?;
    let mut b = Bindings::new();
    b.bind(obj.theta, Tensor::vector(theta.to_vec()))
        .bind(obj.x, x)
        .bind(obj.y, Tensor::vector(y.iter().map(|&c| c as f64).collect()))
        .bind(obj.noise, Tensor::vector(noise.to_vec()))
        .bind(obj.mask, Tensor::vector(vec![1.0; n]))
        .bind(obj.fixed, Tensor::vector(vec![0.0; n]));
    if let Some(beta) = obj.beta {
        b.bind(beta, Tensor::vector(model.betas.clone()));
    }
    Ok(finite_diff_check(&mut obj.graph, obj.loss, &b, &[obj.theta], h)?)
}

/// `mu = rho sqrt(2 kappa_w) tanh(tau)` and
/// `sigma = rho sqrt(-W(-exp(2 kappa_w (tanh^2 tau - 1) - 1)))`.
fn mean_kl_moments(
    g: &mut Graph,
    tau: NodeId,
    logits: NodeId,
    log_rho_w: NodeId,
    segs: Segments,
    cfg: &TrainConfig,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let rho = g.exp(log_rho_w);
    let gamma = g.segment_softmax(logits, segs)?;
    let two_kappa = g.scale(gamma, 2.0 * cfg.budget_nats());
    let t = g.tanh(tau);
    let radius = g.sqrt(two_kappa);
    let rho_radius = g.mul(rho, radius)?;
    let mean = g.mul(rho_radius, t)?;

    let t2 = g.square(t);
    let t2m1 = g.offset(t2, -1.0);
    let arg = g.mul(two_kappa, t2m1)?;
    let arg = g.offset(arg, -1.0);
    let e = g.exp(arg);
    let x = g.neg(e);
    let w = g.lambert_w(x, cfg.lambert);
    let neg_w = g.neg(w);
    let root = g.sqrt(neg_w);
    let std = g.mul(rho, root)?;
    Ok((mean, std))
}

/// `log rho - log sigma + (sigma^2 + mu^2) / (2 rho^2) - 1/2` per weight.
fn mean_var_kl(g: &mut Graph, mu: NodeId, log_sigma: NodeId, sigma: NodeId, log_rho_w: NodeId) -> Result<NodeId, AutodiffError> {
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let second = g.add(s2, m2)?;
    let neg2 = g.scale(log_rho_w, -2.0);
    let inv_rho2 = g.exp(neg2);
    let ratio = g.mul(second, inv_rho2)?;
    let half = g.scale(ratio, 0.5);
    let log_ratio = g.sub(log_rho_w, log_sigma)?;
    let kl = g.add(log_ratio, half)?;
    Ok(g.offset(kl, -0.5))
}
