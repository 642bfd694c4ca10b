use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{self, Objective};
use super::{
    Parameterization, PipelineError, TrainConfig, CODING_LOG_STD_INIT, GATE_SLACK_NATS, MEANVAR_LOG_STD_INIT,
};
use crate::autodiff::{AutodiffError, Bindings, Tensor};
use crate::cli_io::Dataset;
use crate::gaussian::{gauss_kl, meankl_to_meanvar, tau_from_mean, DiagonalGaussian, Gaussian1D, MeanKLBlockParams};
use crate::nn::ModelSpec;
use crate::optim::Adam;
use crate::rec_codec::{derive_seed, partition_blocks, BlockSpec};

const INIT_SALT: u64 = 1;
const STREAM_SALT: u64 = 2;

/// Multiplicative β update: grow while the block is over budget, shrink
/// otherwise (including exactly on budget). β never drops below its
/// starting value `eps_beta0`.
pub fn anneal_beta(beta: f64, kl_block: f64, budget: f64, cfg: &TrainConfig) -> f64 {
    if kl_block > budget {
        beta * (1.0 + cfg.eps_beta)
    } else {
        (beta / (1.0 + cfg.eps_beta)).max(cfg.eps_beta0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Posterior {
    MeanVar { means: Vec<f64>, log_stds: Vec<f64> },
    MeanKL { taus: Vec<f64>, quota_logits: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    /// Minibatch cross-entropy of the sampled network.
    pub cross_entropy: f64,
    /// `Σ_b KL(q_b || p_b)` over every block.
    pub kl_nats: f64,
    /// Mean β over blocks (Mean-Var) or the per-block budget κ (Mean-KL).
    pub beta_or_kappa: f64,
    /// Blocks whose KL exceeds budget + [`GATE_SLACK_NATS`].
    pub blocks_over: usize,
    /// `max_b KL_b - budget`.
    pub max_block_excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Complete training state: posterior, coding distribution, optimizer and
/// annealing state. Serializable as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub blocks: BlockSpec,
    theta: Vec<f64>,
    pub betas: Vec<f64>,
    pub adam: Adam,
    pub iterations: u64,
}

impl TrainedModel {
    /// Fresh state: default-initialised network weights become the Mean-Var
    /// means directly, or pass through the inverse mean map with uniform
    /// quotas for Mean-KL.
    pub fn init(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let n = spec.param_count();
        let blocks = partition_blocks(n, cfg.block_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_SALT));
        let w0 = spec.init_params(&mut rng);
        let layers = spec.layers.len();
        let mut theta = Vec::with_capacity(2 * n + layers);
        match cfg.parameterization {
            Parameterization::MeanVar => {
                theta.extend_from_slice(&w0);
                theta.extend(std::iter::repeat(MEANVAR_LOG_STD_INIT).take(n));
            }
            Parameterization::MeanKL => {
                let prior = Gaussian1D::new(0.0, CODING_LOG_STD_INIT);
                for &(start, len) in &blocks.blocks {
                    let kappa_w = cfg.budget_nats() / len as f64;
                    theta.extend(w0[start..start + len].iter().map(|&w| tau_from_mean(w, kappa_w, prior)));
                }
                theta.extend(std::iter::repeat(0.0).take(n));
            }
        }
        theta.extend(std::iter::repeat(CODING_LOG_STD_INIT).take(layers));
        let betas = match cfg.parameterization {
            Parameterization::MeanVar => vec![cfg.eps_beta0; blocks.len()],
            Parameterization::MeanKL => Vec::new(),
        };
        let adam = Adam::new(theta.len(), cfg.learning_rate);
        Ok(Self { spec: spec.clone(), config: cfg.clone(), blocks, theta, betas, adam, iterations: 0 })
    }

    #[cfg(test)]
    pub(crate) fn with_theta_prefix(mut self, values: &[f64]) -> Self {
        self.theta[..values.len()].copy_from_slice(values);
        self
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn posterior(&self) -> Posterior {
        let n = self.param_count();
        let (a, b) = (self.theta[..n].to_vec(), self.theta[n..2 * n].to_vec());
        match self.config.parameterization {
            Parameterization::MeanVar => Posterior::MeanVar { means: a, log_stds: b },
            Parameterization::MeanKL => Posterior::MeanKL { taus: a, quota_logits: b },
        }
    }

    /// One coding log standard deviation per layer.
    pub fn coding_log_stds(&self) -> &[f64] {
        &self.theta[2 * self.param_count()..]
    }

    /// The coding distribution expanded to one marginal per parameter.
    pub fn coding_gaussian(&self) -> DiagonalGaussian {
        let lr = self.coding_log_stds();
        let log_stds = self.spec.layer_of_param().into_iter().map(|l| lr[l]).collect();
        DiagonalGaussian { means: vec![0.0; self.param_count()], log_stds }
    }

    /// The posterior as explicit means and log standard deviations.
    pub fn posterior_gaussian(&self) -> Result<DiagonalGaussian, PipelineError> {
        match self.posterior() {
            Posterior::MeanVar { means, log_stds } => Ok(DiagonalGaussian::new(means, log_stds)?),
            Posterior::MeanKL { taus, quota_logits } => {
                let p = self.coding_gaussian();
                let mut means = Vec::with_capacity(taus.len());
                let mut log_stds = Vec::with_capacity(taus.len());
                for b in 0..self.blocks.len() {
                    let r = self.blocks.range(b);
                    let params = MeanKLBlockParams {
                        taus: taus[r.clone()].to_vec(),
                        quota_logits: quota_logits[r.clone()].to_vec(),
                        kappa_block: self.config.budget_nats(),
                    };
                    let mv = meankl_to_meanvar(&params, &p.slice(r.start, r.len()), self.config.lambert)?;
                    means.extend(mv.means);
                    log_stds.extend(mv.log_stds);
                }
                Ok(DiagonalGaussian { means, log_stds })
            }
        }
    }

    /// `KL(q_b || p_b)` for every block, from the explicit posterior.
    pub fn block_kls(&self) -> Result<Vec<f64>, PipelineError> {
        let q = self.posterior_gaussian()?;
        let p = self.coding_gaussian();
        Ok(per_block_kl(&self.blocks, &q.means, &q.log_stds, &p.log_stds))
    }
}

fn per_block_kl(blocks: &BlockSpec, means: &[f64], log_stds: &[f64], coding_log_stds: &[f64]) -> Vec<f64> {
    blocks
        .blocks
        .iter()
        .map(|&(s, l)| {
            (s..s + l)
                .map(|i| gauss_kl(Gaussian1D::new(means[i], log_stds[i]), Gaussian1D::new(0.0, coding_log_stds[i])))
                .sum()
        })
        .collect()
}

/// A live optimisation loop over one model and dataset. Blocks can be fixed
/// to constants part-way through, which is how compression fine-tunes.
pub(crate) struct Session<'d> {
    pub model: TrainedModel,
    obj: Objective,
    data: &'d Dataset,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    mask: Vec<f64>,
    fixed: Vec<f64>,
    frozen: Vec<bool>,
    block_fixed: Vec<bool>,
    layer_of: Vec<usize>,
}

impl<'d> Session<'d> {
    pub fn new(model: TrainedModel, data: &'d Dataset, salt: u64) -> Result<Self, PipelineError> {
        if data.is_empty() {
            return Err(PipelineError::EmptyData);
        }
        if data.dim() != model.spec.input_dim() {
            return Err(PipelineError::DataShape { expected: model.spec.input_dim(), found: data.dim() });
        }
        let batch = model.config.batch_size.min(data.len());
        let obj = objective::build(&model.spec, &model.blocks, &model.config, batch, data.len())?;
        let seed = derive_seed(derive_seed(model.config.seed, STREAM_SALT ^ salt), model.iterations);
        let n = model.param_count();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..data.len()).collect(),
            cursor: data.len(),
            batch,
            mask: vec![1.0; n],
            fixed: vec![0.0; n],
            frozen: vec![false; model.theta.len()],
            block_fixed: vec![false; model.blocks.len()],
            layer_of: model.spec.layer_of_param(),
            obj,
            data,
            model,
        })
    }

    /// Stops updating the coding distribution.
    pub fn freeze_coding(&mut self) {
        let n = self.model.param_count();
        self.frozen[2 * n..].iter_mut().for_each(|f| *f = true);
    }

    /// Replaces block `b` by the constant `values` for all later steps.
    pub fn fix_block(&mut self, b: usize, values: &[f64]) {
        let n = self.model.param_count();
        let r = self.model.blocks.range(b);
        for (i, &v) in r.clone().zip(values) {
            self.mask[i] = 0.0;
            self.fixed[i] = v;
            self.frozen[i] = true;
            self.frozen[n + i] = true;
        }
        self.block_fixed[b] = true;
    }

    pub fn fixed_weights(&self) -> &[f64] {
        &self.fixed
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        idx
    }

    pub fn step(&mut self) -> Result<TraceRecord, PipelineError> {
        let n = self.model.param_count();
        let idx = self.next_batch();
        let (xb, yb) = self.data.batch(&idx);
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let o = &self.obj;
        let mut bind = Bindings::new();
        bind.bind(o.theta, Tensor::vector(self.model.theta.clone()))
            .bind(o.x, xb)
            .bind(o.y, Tensor::vector(yb.into_iter().map(|y| y as f64).collect()))
            .bind(o.noise, Tensor::vector(noise))
            .bind(o.mask, Tensor::vector(self.mask.clone()))
            .bind(o.fixed, Tensor::vector(self.fixed.clone()));
        if let Some(beta) = o.beta {
            let live = self.model.betas.iter().zip(&self.block_fixed).map(|(&b, &f)| if f { 0.0 } else { b }).collect();
            bind.bind(beta, Tensor::vector(live));
        }
        let loss = o.loss;
        self.obj.graph.forward(&bind, loss)?;
        let g = &self.obj.graph;
        let ce = g.value_slice(self.obj.ce).expect("evaluated")[0];
        let kls = match self.obj.kl_blocks {
            Some(k) => g.value_slice(k).expect("evaluated").to_vec(),
            None => {
                let mean = g.value_slice(self.obj.mean).expect("evaluated");
                let log_std: Vec<f64> = g.value_slice(self.obj.std).expect("evaluated").iter().map(|s| s.ln()).collect();
                let lr = self.model.coding_log_stds();
                let coding: Vec<f64> = self.layer_of.iter().map(|&l| lr[l]).collect();
                per_block_kl(&self.model.blocks, mean, &log_std, &coding)
            }
        };
        let grads = g.backward(loss)?;
        let grad = grads.get(self.obj.theta).expect("theta is trainable").data().to_vec();
        self.model.adam.step(&mut self.model.theta, &grad, Some(&self.frozen));

        let budget = self.model.config.budget_nats();
        let beta_or_kappa = match self.model.config.parameterization {
            Parameterization::MeanVar => {
                let cfg = self.model.config.clone();
                for (b, beta) in self.model.betas.iter_mut().enumerate() {
                    if !self.block_fixed[b] {
                        *beta = anneal_beta(*beta, kls[b], budget, &cfg);
                    }
                }
                self.model.betas.iter().sum::<f64>() / self.model.betas.len() as f64
            }
            Parameterization::MeanKL => budget,
        };
        self.model.iterations += 1;
        Ok(TraceRecord {
            iter: self.model.iterations,
            cross_entropy: ce,
            kl_nats: kls.iter().sum(),
            beta_or_kappa,
            blocks_over: kls.iter().filter(|&&k| k > budget + GATE_SLACK_NATS).count(),
            max_block_excess: kls.iter().map(|k| k - budget).fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

fn run(model: TrainedModel, data: &Dataset, iters: usize) -> Result<(TrainedModel, TrainTrace), PipelineError> {
    let mut session = Session::new(model, data, 0)?;
    let mut trace = TrainTrace::default();
    for _ in 0..iters {
        match session.step() {
            Ok(rec) => trace.records.push(rec),
            Err(PipelineError::Graph(AutodiffError::NonFinite { .. } | AutodiffError::Domain { .. })) => {
                return Err(PipelineError::Diverged { iter: session.model.iterations + 1, trace: Box::new(trace) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((session.model, trace))
}

/// Variational training for `cfg.max_iters` iterations from a fresh
/// initialisation.
pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(TrainedModel, TrainTrace), PipelineError> {
    run(TrainedModel::init(spec, cfg)?, data, cfg.max_iters)
}

/// Continues training a checkpoint for `iters` more iterations.
pub fn resume(model: TrainedModel, data: &Dataset, iters: usize) -> Result<(TrainedModel, TrainTrace), PipelineError> {
    run(model, data, iters)
}
