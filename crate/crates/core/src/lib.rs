//! Capsule routing self-attention embedded in a small encoder-decoder Transformer.
//!
//! Layering, bottom to top:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode differentiation tape.
//! - [`attention`]: multi-head scaled dot-product attention around an explicit logits cube.
//! - [`routing`]: dynamic routing with the squashing nonlinearity.
//! - [`capsule_san`]: vertical and horizontal routing over the logits cube.
//! - [`model`]: configuration, parameters, the Seq2Seq model and checkpoints.
//! - [`train`]: synthetic tasks, optimizer, training loop, BLEU and evaluation.

pub mod attention;
pub mod capsule_san;
pub mod error;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
