//! Encoder-decoder Transformer whose self-attention sublayers can route.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod seq2seq;

pub use checkpoint::Checkpoint;
pub use config::{LayerRange, ModelConfig, Stack};
pub use params::{Binder, Init, ParamStore};
pub use seq2seq::{positional_encoding, teacher_forcing_pair, Encoded, ExampleGradients, Seq2SeqModel};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Token ids below this are reserved.
pub const FIRST_CONTENT_TOKEN: usize = 3;
