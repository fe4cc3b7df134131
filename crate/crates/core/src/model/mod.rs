//! Network definitions.

pub mod layers;
mod tokenizer;

pub use tokenizer::{
    nearest_code, Analysis, Encoded, Quantized, Stage1Output, Stage2Output, Tokenizer,
    TokenizerConfig, PROB_HEAD_BIAS_INIT, P_CLAMP,
};
