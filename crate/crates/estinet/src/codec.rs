//! Bidirectional codec between IEEE single-precision numbers and fixed-width
//! `{0,1}` embedding vectors.
//!
//! A number is expanded into its 32-bit pattern (sign, then exponent MSB..LSB,
//! then mantissa MSB..LSB), each bit is repeated `r` times for redundancy, and
//! the result is zero-padded to the embedding dimension `d`. The embeddings
//! live in the same vector space as word embeddings, so numbers and words can
//! share one input sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Scalar;

/// Canonical quiet-NaN bit pattern used for every NaN input.
pub const CANONICAL_NAN_BITS: u32 = 0x7FC0_0000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid codec config: redundancy {redundancy} * 32 exceeds dimension {dim}")]
    Config { dim: usize, redundancy: usize },
    #[error("embedding length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
}

/// Embedding dimension `d` and redundancy factor `r`.
///
/// `r * 32 <= d`; the last `d - r*32` positions are a zero-padding region.
/// The strict-padding case `r*32 < d` is the default; exact fit is allowed as
/// a degenerate no-padding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub dim: usize,
    pub redundancy: usize,
}

impl CodecConfig {
    pub fn new(dim: usize, redundancy: usize) -> Result<Self, CodecError> {
        if dim == 0 || redundancy == 0 || redundancy * 32 > dim {
            return Err(CodecError::Config { dim, redundancy });
        }
        Ok(Self { dim, redundancy })
    }

    /// Number of positions carrying bit copies (`r * 32`).
    pub fn payload_len(&self) -> usize {
        self.redundancy * 32
    }
}

impl Default for CodecConfig {
    /// d=128, r=3: 96 payload positions plus 32 zero padding. Three copies per
    /// bit survive one flipped copy.
    fn default() -> Self {
        Self { dim: 128, redundancy: 3 }
    }
}

/// Length-`d` vector holding one encoded number.
///
/// Entries are exactly 0.0 or 1.0 when produced by [`encode_number`]; the
/// decoder tolerates soft values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumberEmbedding {
    values: Vec<f32>,
}

impl NumberEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Encodes `x` as its 32-bit pattern with each bit repeated `r` times,
/// zero-padded to length `d`. NaN inputs are canonicalized to
/// [`CANONICAL_NAN_BITS`] so NaN encoding is deterministic.
pub fn encode_number(x: f32, cfg: &CodecConfig) -> NumberEmbedding {
    let bits = if x.is_nan() { CANONICAL_NAN_BITS } else { x.to_bits() };
    let mut values = vec![0.0f32; cfg.dim];
    for bit in 0..32 {
        if (bits >> (31 - bit)) & 1 == 1 {
            let base = bit * cfg.redundancy;
            for copy in 0..cfg.redundancy {
                values[base + copy] = 1.0;
            }
        }
    }
    NumberEmbedding { values }
}

/// Encoding of the canonical quiet-NaN pattern, used where a scalar argument
/// is not relevant.
pub fn encode_nan(cfg: &CodecConfig) -> NumberEmbedding {
    encode_number(f32::from_bits(CANONICAL_NAN_BITS), cfg)
}

/// Recovers the number from an embedding: each bit is decided by majority
/// vote over its `r` copies (a copy with value >= 0.5 counts as a 1 vote,
/// and the bit is 1 when at least `ceil(r/2)` votes are 1), then the 32
/// recovered bits are bit-cast back to a single-precision value. Positions
/// beyond `r*32` are ignored.
pub fn decode_number(values: &[f32], cfg: &CodecConfig) -> Result<f32, CodecError> {
    if values.len() != cfg.dim {
        return Err(CodecError::Length { expected: cfg.dim, got: values.len() });
    }
    let threshold = cfg.redundancy.div_ceil(2);
    let mut bits = 0u32;
    for bit in 0..32 {
        let base = bit * cfg.redundancy;
        let votes = values[base..base + cfg.redundancy]
            .iter()
            .filter(|&&v| v >= 0.5)
            .count();
        if votes >= threshold {
            bits |= 1 << (31 - bit);
        }
    }
    Ok(f32::from_bits(bits))
}

/// Decodes a [`NumberEmbedding`] directly.
pub fn decode_embedding(e: &NumberEmbedding, cfg: &CodecConfig) -> Result<f32, CodecError> {
    decode_number(&e.values, cfg)
}

/// Encodes into the generic scalar type used by the compute graph.
pub fn encode_number_as<S: Scalar>(x: f32, cfg: &CodecConfig) -> Vec<S> {
    encode_number(x, cfg)
        .into_vec()
        .into_iter()
        .map(|v| S::from_f64(v as f64))
        .collect()
}
