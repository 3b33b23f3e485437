//! Long-context inference by compress, gather and recompute.
//!
//! The engine reads a long input in chunks over a budgeted, evicting KV cache
//! while recording lightweight per-token context embeddings from a few
//! attention heads. It then scores every context token against the query,
//! gathers the most relevant tokens and recomputes a full-depth KV cache for
//! just those tokens before decoding.

pub mod bench;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod headfinder;
pub mod kv_cache;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod retrieval;
pub mod rfwt;
pub mod rope;
pub mod tensor;
pub mod tokenizer;
pub mod weights;

pub use config::ModelConfig;
pub use embeddings::{EmbeddingStore, HeadSpec, Precision, Projection};
pub use error::{Error, Result};
pub use kv_cache::{CacheLimits, EvictionPolicy, KVCacheSet, LayerKVCache};
pub use model::{ForwardOptions, Model, TappedStates};
pub use pipeline::{PipelineConfig, PrefillResult, QuerySplit, WorkStats};
pub use retrieval::SelectionSet;
pub use tokenizer::{TokenId, Tokenizer};
pub use weights::ModelWeights;
