//! Estimate and Replace: train a network whose estimator sublayers mimic
//! non-differentiable external applications, then swap each estimator for the
//! real application at inference time.
//!
//! The pieces, bottom-up:
//!
//! - [`codec`]: numbers as bit-level `{0,1}` embedding vectors.
//! - [`oracle`]: the external logic applications, their typed signatures, and
//!   the adaptation functions between selector space and application space.
//! - [`data`]: synthetic table-QA and two-number comparison datasets with
//!   gold selector labels.
//! - [`graph`]: the reverse-mode autodiff tape with gradient stops.
//! - [`layers`]: recurrent encoder, transformer encoder, selector heads,
//!   Gumbel-Softmax discrete selection.
//! - [`model`]: the full network, its forward modes, and checkpointing.
//! - [`train`]: the total loss, online label generation, and the five
//!   training procedures.
//! - [`eval`]: train/test/inference assessment and component diagnostics.
//! - [`metrics`], [`cli`], [`plot`]: the experiment runner.

pub mod cli;
pub mod codec;
pub mod data;
pub mod graph;
pub mod layers;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod train;
pub mod oracle;

pub use codec::{decode_number, encode_nan, encode_number, CodecConfig, NumberEmbedding};
pub use oracle::{apply_logic_op, ApiSignature, LogicOp};
