//! Encoder-decoder session generator over semantic-ID tokens.

mod config;
mod decode;
mod model;
mod tokens;
mod train;

pub use config::ModelConfig;
pub use decode::{beam_search, entropy_report, first_item_entropy, sample_session, BeamOptions, BeamResult, Hypothesis};
pub use model::{
    ffn, layer_norm, linear, moe_ffn, moe_forward, multi_head, route, CrossKv, DecoderCache, EncodedHistory, Ffn, GenModel,
    Linear, Moe, Norm, ParamBuilder, Sample, EXPERT_SCOPE,
};
pub use tokens::{build_decoder_tokens, history_tokens, parse_decoder_input, DecoderTokens, TokenLayout};
pub use train::{
    apply_gradients, gate_usage, mean_eval_loss, ntp_sample_grad, ntp_step, train_seed_model, BatchSampler, TrainConfig,
    TrainReport, BATCH_STREAM,
};
