//! Miniature decoder-only language model and the recurrent inverter.

pub mod checkpoint;
pub mod gru;
mod params;
pub mod tokenizer;
mod train;
mod transformer;

pub use gru::{gru_invert, InverterParams, InverterShape};
pub use params::{
    block_of, block_prefix, is_adapter, Bound, ModelConfig, ModelParams, ParamSet, ATTN_MATRICES,
    INIT_STD,
};
pub use tokenizer::{detokenize, tokenize, TokenBatch, BOS, BYTE_VOCAB, PAD};
pub use train::{
    batch_nll, eval_batches, perplexity, pretrain, train_step, train_step_on, Batcher,
    PretrainConfig,
};
pub use transformer::{forward_segment, lm_loss, shifted_targets, Segment, SegmentInput};
