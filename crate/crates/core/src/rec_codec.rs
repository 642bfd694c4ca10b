//! Minimal random coding of diagonal Gaussian blocks.
//!
//! Encoder and decoder share a counter-based candidate stream drawn from the
//! coding distribution `p`. The encoder scores `K = 2^bits` candidates by
//! their importance weight `q(w) / p(w)`, samples one index in proportion to
//! those weights with the Gumbel-max trick and transmits only the index. The
//! decoder regenerates that single candidate in `O(block_size)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::DiagonalGaussian;

/// Largest accepted per-block budget in bits.
pub const MAX_BUDGET_BITS: u32 = 26;

const CANDIDATE_DOMAIN: u64 = 0x6d69_7261_636c_6531;
const SELECTION_DOMAIN: u64 = 0x6775_6d62_656c_5f73;
const DEFAULT_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("block partition needs positive sizes, got total {total_dims} and block size {block_size}")]
    ZeroSize { total_dims: usize, block_size: usize },
    #[error("budget of {0} bits is outside 1..={MAX_BUDGET_BITS}")]
    Budget(u32),
    #[error("q and p have different lengths ({q} vs {p})")]
    DimensionMismatch { q: usize, p: usize },
    #[error("non-finite log importance weight for candidate {0}")]
    NonFiniteLogRatio(u64),
    #[error("index {index} does not fit in {budget_bits} bits")]
    IndexOutOfRange { index: u64, budget_bits: u32 },
    #[error("bitstream has {found} bytes, expected {expected}")]
    StreamLength { expected: usize, found: usize },
}

/// Dimensionwise partition of a flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub total_dims: usize,
    pub block_size: usize,
    pub blocks: Vec<(usize, usize)>,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        let (start, len) = self.blocks[b];
        start..start + len
    }
}

/// Seed material shared by encoder and decoder for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub global_seed: u64,
    pub block_id: u64,
}

impl StreamKey {
    pub fn new(global_seed: u64, block_id: u64) -> Self {
        Self { global_seed, block_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedBlock {
    pub index: u64,
    pub budget_bits: u32,
}

impl EncodedBlock {
    pub fn new(index: u64, budget_bits: u32) -> Result<Self, CodecError> {
        check_field(index, budget_bits)?;
        Ok(Self { index, budget_bits })
    }
}

fn check_field(index: u64, budget_bits: u32) -> Result<(), CodecError> {
    if budget_bits < 64 && index >> budget_bits != 0 {
        return Err(CodecError::IndexOutOfRange { index, budget_bits });
    }
    Ok(())
}

pub fn partition_blocks(total_dims: usize, block_size: usize) -> Result<BlockSpec, CodecError> {
    if total_dims == 0 || block_size == 0 {
        return Err(CodecError::ZeroSize { total_dims, block_size });
    }
    let blocks = (0..total_dims)
        .step_by(block_size)
        .map(|start| (start, block_size.min(total_dims - start)))
        .collect();
    Ok(BlockSpec { total_dims, block_size, blocks })
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0u64, |h, &w| mix64(h ^ w))
}

/// Splits `seed` into an independent stream identified by `salt`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    hash_words(&[seed, salt])
}

/// Uniform on the open interval (0, 1) from the top 53 bits.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn standard_normal(key: StreamKey, sample_idx: u64, dim: u64) -> f64 {
    let base = [CANDIDATE_DOMAIN, key.global_seed, key.block_id, sample_idx, dim];
    let h = hash_words(&base);
    let u1 = open_unit(mix64(h ^ 1));
    let u2 = open_unit(mix64(h ^ 2));
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

fn gumbel(selection_seed: u64, k: u64) -> f64 {
    let u = open_unit(hash_words(&[SELECTION_DOMAIN, selection_seed, k]));
    -libm::log(-libm::log(u))
}

/// The `sample_idx`-th candidate of the stream: `nu + rho * n` per dimension.
pub fn candidate_sample(key: StreamKey, sample_idx: u64, p_block: &DiagonalGaussian) -> Vec<f64> {
    (0..p_block.len())
        .map(|d| {
            let n = standard_normal(key, sample_idx, d as u64);
            p_block.means[d] + libm::exp(p_block.log_stds[d]) * n
        })
        .collect()
}

fn log_ratio(key: StreamKey, k: u64, q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
    let mut acc = 0.0;
    for d in 0..p.len() {
        let n = standard_normal(key, k, d as u64);
        let (pl, ql) = (p.log_stds[d], q.log_stds[d]);
        let w = p.means[d] + libm::exp(pl) * n;
        // log N(w; m, s) without the shared constant
        let zq = (w - q.means[d]) * libm::exp(-ql);
        acc += -0.5 * zq * zq - ql + 0.5 * n * n + pl;
    }
    acc
}

fn better(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Gumbel-max selection with an explicit chunk size for the parallel scan.
pub fn encode_block_chunked(
    q_block: &DiagonalGaussian,
    p_block: &DiagonalGaussian,
    budget_bits: u32,
    key: StreamKey,
    selection_seed: u64,
    chunk: usize,
) -> Result<EncodedBlock, CodecError> {
    if budget_bits == 0 || budget_bits > MAX_BUDGET_BITS {
        return Err(CodecError::Budget(budget_bits));
    }
    if q_block.len() != p_block.len() {
        return Err(CodecError::DimensionMismatch { q: q_block.len(), p: p_block.len() });
    }
    let k_total = 1u64 << budget_bits;
    let chunk = chunk.max(1) as u64;
    let n_chunks = k_total.div_ceil(chunk);
    let best = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut best = (f64::NEG_INFINITY, u64::MAX);
            for k in c * chunk..((c + 1) * chunk).min(k_total) {
                let lr = log_ratio(key, k, q_block, p_block);
                if !lr.is_finite() {
                    return Err(CodecError::NonFiniteLogRatio(k));
                }
                best = better(best, (lr + gumbel(selection_seed, k), k));
            }
            Ok(best)
        })
        .try_reduce(|| (f64::NEG_INFINITY, u64::MAX), |a, b| Ok(better(a, b)))?;
    Ok(EncodedBlock { index: best.1, budget_bits })
}

/// Draws `k* ~ softmax(log q(w_k) - log p(w_k))` over `K = 2^budget_bits`
/// shared candidates.
pub fn encode_block(
    q_block: &DiagonalGaussian,
    p_block: &DiagonalGaussian,
    budget_bits: u32,
    key: StreamKey,
    selection_seed: u64,
) -> Result<EncodedBlock, CodecError> {
    encode_block_chunked(q_block, p_block, budget_bits, key, selection_seed, DEFAULT_CHUNK)
}

pub fn decode_block(p_block: &DiagonalGaussian, enc: EncodedBlock, key: StreamKey) -> Result<Vec<f64>, CodecError> {
    check_field(enc.index, enc.budget_bits)?;
    Ok(candidate_sample(key, enc.index, p_block))
}

/// Concatenates indices as big-endian fields, MSB first, zero-padding the
/// final byte.
pub fn pack_indices(blocks: &[EncodedBlock]) -> Result<Vec<u8>, CodecError> {
    let total: usize = blocks.iter().map(|b| b.budget_bits as usize).sum();
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for b in blocks {
        check_field(b.index, b.budget_bits)?;
        for i in (0..b.budget_bits).rev() {
            if (b.index >> i) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], budgets: &[u32]) -> Result<Vec<EncodedBlock>, CodecError> {
    let total: usize = budgets.iter().map(|&b| b as usize).sum();
    let expected = total.div_ceil(8);
    if bytes.len() != expected {
        return Err(CodecError::StreamLength { expected, found: bytes.len() });
    }
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(budgets.len());
    for &bits in budgets {
        let mut index = 0u64;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            index = (index << 1) | bit as u64;
            pos += 1;
        }
        out.push(EncodedBlock { index, budget_bits: bits });
    }
    Ok(out)
}
