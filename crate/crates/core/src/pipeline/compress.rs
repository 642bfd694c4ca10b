use super::format::{CodingParams, CompressedModel};
use super::train::{Session, TrainTrace, TrainedModel};
use super::{Parameterization, PipelineError, GATE_SLACK_NATS};
use crate::cli_io::Dataset;
use crate::gaussian::DiagonalGaussian;
use crate::nn::ModelSpec;
use crate::rec_codec::{decode_block, derive_seed, encode_block, partition_blocks, StreamKey};

const GLOBAL_SALT: u64 = 0x676c_6f62;
const SELECTION_SALT: u64 = 0x7365_6c65;
const FINETUNE_SALT: u64 = 0x6674;

/// Everything produced by one blockwise compression pass.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub model: CompressedModel,
    /// The decoded weights the compressor fixed, block by block.
    pub weights: Vec<f64>,
    /// Posterior of each block at the moment it was encoded.
    pub posterior: DiagonalGaussian,
    /// `KL(q_b || p_b)` at encoding time.
    pub block_kls: Vec<f64>,
    pub finetune_steps: usize,
    /// Extra Mean-Var annealing steps spent waiting for the budget gate.
    pub gate_steps: usize,
    pub trace: TrainTrace,
}

/// Encodes block `b`, fixes its decoded sample, fine-tunes blocks `b+1..B`
/// for `finetune_steps` steps, and repeats. Coding parameters are frozen
/// for the whole pass.
pub fn compress_model(trained: &TrainedModel, data: &Dataset) -> Result<CompressionOutcome, PipelineError> {
    let cfg = trained.config.clone();
    let mut session = Session::new(trained.clone(), data, FINETUNE_SALT)?;
    session.freeze_coding();
    let p = trained.coding_gaussian();
    let global_seed = derive_seed(cfg.seed, GLOBAL_SALT);
    let selection_seed = derive_seed(cfg.seed, SELECTION_SALT);
    let budget = cfg.budget_nats();
    let n_blocks = trained.blocks.len();

    let mut trace = TrainTrace::default();
    let mut indices = Vec::with_capacity(n_blocks);
    let mut post = DiagonalGaussian { means: Vec::new(), log_stds: Vec::new() };
    let mut block_kls = Vec::with_capacity(n_blocks);
    let (mut finetune_steps, mut gate_steps) = (0, 0);

    for b in 0..n_blocks {
        if cfg.parameterization == Parameterization::MeanVar {
            let mut waited = 0;
            loop {
                let kl = session.model.block_kls()?[b];
                if kl <= budget + GATE_SLACK_NATS {
                    break;
                }
                if waited >= cfg.max_iters {
                    return Err(PipelineError::OverBudget { block: b, kl, budget, iters: waited });
                }
                trace.records.push(session.step()?);
                waited += 1;
            }
            gate_steps += waited;
        }
        let r = trained.blocks.range(b);
        let q_b = session.model.posterior_gaussian()?.slice(r.start, r.len());
        let p_b = p.slice(r.start, r.len());
        block_kls.push(crate::gaussian::block_kl(&q_b, &p_b)?);
        let key = StreamKey::new(global_seed, b as u64);
        let enc = encode_block(&q_b, &p_b, cfg.budget_bits_per_block, key, derive_seed(selection_seed, b as u64))?;
        let sample = decode_block(&p_b, enc, key)?;
        session.fix_block(b, &sample);
        indices.push(enc);
        post.means.extend(q_b.means);
        post.log_stds.extend(q_b.log_stds);
        if b + 1 < n_blocks {
            for _ in 0..cfg.finetune_steps {
                trace.records.push(session.step()?);
            }
            finetune_steps += cfg.finetune_steps;
        }
    }

    let coding = trained.coding_log_stds().iter().map(|&log_rho| CodingParams { nu: 0.0, log_rho }).collect();
    let model = CompressedModel {
        spec: trained.spec.clone(),
        coding,
        block_size: cfg.block_size as u32,
        budget_bits: cfg.budget_bits_per_block,
        global_seed,
        selection_seed,
        indices,
    };
    Ok(CompressionOutcome {
        model,
        weights: session.fixed_weights().to_vec(),
        posterior: post,
        block_kls,
        finetune_steps,
        gate_steps,
        trace,
    })
}

fn coding_gaussian(spec: &ModelSpec, coding: &[CodingParams]) -> DiagonalGaussian {
    let layer_of = spec.layer_of_param();
    DiagonalGaussian {
        means: layer_of.iter().map(|&l| coding[l].nu).collect(),
        log_stds: layer_of.iter().map(|&l| coding[l].log_rho).collect(),
    }
}

/// Regenerates every block's weights from the shared candidate streams.
pub fn decompress_model(cm: &CompressedModel) -> Result<Vec<f64>, PipelineError> {
    let n = cm.spec.param_count();
    let blocks = partition_blocks(n, cm.block_size as usize)?;
    if blocks.len() != cm.indices.len() {
        return Err(super::FormatError::BlockCount { expected: blocks.len(), found: cm.indices.len() }.into());
    }
    let p = coding_gaussian(&cm.spec, &cm.coding);
    let mut weights = Vec::with_capacity(n);
    for (b, &enc) in cm.indices.iter().enumerate() {
        let r = blocks.range(b);
        weights.extend(decode_block(&p.slice(r.start, r.len()), enc, StreamKey::new(cm.global_seed, b as u64))?);
    }
    Ok(weights)
}
