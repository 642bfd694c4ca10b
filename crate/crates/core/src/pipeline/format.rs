//! Binary container for a compressed model.
//!
//! ```text
//! "MRCL" | u16 version
//! u32 layer count | per layer: u32 in, u32 out, u8 kind (0 dense, 1 dense+bias)
//! per layer: f64 nu, f64 log rho
//! u32 block_size | u32 budget_bits | u64 global_seed | u64 selection_seed
//! u32 block_count | packed indices
//! ```
//! Fixed-width fields are little-endian; the index stream is MSB-first.

use thiserror::Error;

use crate::nn::{LayerSpec, ModelSpec};
use crate::rec_codec::{pack_indices, unpack_indices, CodecError, EncodedBlock, MAX_BUDGET_BITS};

pub const MAGIC: [u8; 4] = *b"MRCL";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("not a compressed model (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("unknown layer kind {0}")]
    LayerKind(u8),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("header declares {found} blocks, architecture and block size imply {expected}")]
    BlockCount { expected: usize, found: usize },
    #[error("budget of {0} bits is not supported")]
    Budget(u32),
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Per-layer coding distribution `N(nu, exp(log_rho)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingParams {
    pub nu: f64,
    pub log_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub spec: ModelSpec,
    pub coding: Vec<CodingParams>,
    pub block_size: u32,
    pub budget_bits: u32,
    pub global_seed: u64,
    pub selection_seed: u64,
    pub indices: Vec<EncodedBlock>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated { needed: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

impl CompressedModel {
    pub fn block_count(&self) -> usize {
        self.indices.len()
    }

    /// `Σ budget_bits` over all blocks.
    pub fn payload_bits(&self) -> usize {
        self.indices.iter().map(|b| b.budget_bits as usize).sum()
    }

    /// Everything before the packed index stream.
    pub fn header_bytes(&self) -> usize {
        4 + 2 + 4 + self.spec.layers.len() * (4 + 4 + 1 + 8 + 8) + 4 + 4 + 8 + 8 + 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(self.header_bytes() + self.payload_bits().div_ceil(8));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spec.layers.len() as u32).to_le_bytes());
        for l in &self.spec.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(u8::from(l.bias));
        }
        for c in &self.coding {
            out.extend_from_slice(&c.nu.to_le_bytes());
            out.extend_from_slice(&c.log_rho.to_le_bytes());
        }
        out.extend_from_slice(&self.block_size.to_le_bytes());
        out.extend_from_slice(&self.budget_bits.to_le_bytes());
        out.extend_from_slice(&self.global_seed.to_le_bytes());
        out.extend_from_slice(&self.selection_seed.to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        out.extend(pack_indices(&self.indices)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let bias = match r.u8()? {
                0 => false,
                1 => true,
                k => return Err(FormatError::LayerKind(k)),
            };
            layers.push(LayerSpec { inputs, outputs, bias });
        }
        let spec = ModelSpec::new(layers).map_err(|e| FormatError::Architecture(e.to_string()))?;
        let mut coding = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            coding.push(CodingParams { nu: r.f64()?, log_rho: r.f64()? });
        }
        let block_size = r.u32()?;
        let budget_bits = r.u32()?;
        let global_seed = r.u64()?;
        let selection_seed = r.u64()?;
        let block_count = r.u32()? as usize;
        if block_size == 0 {
            return Err(FormatError::Architecture("block size 0".into()));
        }
        if budget_bits == 0 || budget_bits > MAX_BUDGET_BITS {
            return Err(FormatError::Budget(budget_bits));
        }
        let expected = spec.param_count().div_ceil(block_size as usize);
        if block_count != expected {
            return Err(FormatError::BlockCount { expected, found: block_count });
        }
        let stream_len = (block_count * budget_bits as usize).div_ceil(8);
        let stream = r.take(stream_len)?;
        let rest = bytes.len() - r.pos;
        if rest != 0 {
            return Err(FormatError::Trailing(rest));
        }
        let indices = unpack_indices(stream, &vec![budget_bits; block_count])?;
        Ok(Self { spec, coding, block_size, budget_bits, global_seed, selection_seed, indices })
    }
}
