//! Power attention: linear attention whose similarity is `(q . k)^p`.
//!
//! The crate provides the tensor-power, symmetric-power and tiled
//! symmetric-power state expansions, the attention, recurrent and chunked
//! evaluation forms (with gating and fused normalization), reverse-mode
//! gradients, FLOP accounting and a small benchmark harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the `*64` / `*32`
//! aliases below name the common instantiations.

pub mod attention;
pub mod bench;
pub mod check;
pub mod chunked;
pub mod error;
pub mod expansions;
pub mod flops;
pub mod gradients;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use attention::{
    attention, exp_attention, linear_attention_form, power_attention_form, window_attention, AttentionConfig,
    Mechanism,
};
pub use chunked::{
    chunked_power_attention, chunked_power_attention_with_stats, discumsum, process_chunk, query_state,
    recurrent_power_attention, update_state, ChunkEngine, ChunkPlan, ChunkState, PowerAttentionStream, StageStats,
};
pub use error::{Error, Result};
pub use expansions::{
    enumerate_ndmi, expand, expansion_dim, vjp_expand, expansion_inner, multinomial_weight, ExpandedVector, ExpansionKind,
    ExpansionSpec, Expander, MultiIndex,
};
pub use flops::{
    count_flops_chunked, state_flops, weight_flops, wsfr, ArchSpec, FlopReport,
};
pub use gradients::{
    finite_difference, vjp_attention, vjp_chunked, vjp_discumsum, vjp_intra_chunk, vjp_power_attention,
    vjp_query_state, vjp_update_state, GradBundle, StreamGrads,
};
pub use scalar::Scalar;
pub use tensor::{max_abs_error, max_rel_error, AttentionOutput, BatchShape, SequenceBatch, Stream, StreamOutput};

pub type SequenceBatch64 = SequenceBatch<f64>;
pub type SequenceBatch32 = SequenceBatch<f32>;
pub type AttentionOutput64 = AttentionOutput<f64>;
pub type AttentionOutput32 = AttentionOutput<f32>;
pub type ChunkState64 = ChunkState<f64>;
pub type ChunkState32 = ChunkState<f32>;
pub type ExpandedVector64 = ExpandedVector<f64>;
pub type ExpandedVector32 = ExpandedVector<f32>;
pub type GradBundle64 = GradBundle<f64>;
pub type GradBundle32 = GradBundle<f32>;
