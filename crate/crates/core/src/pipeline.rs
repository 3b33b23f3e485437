//! Chunked compressive prefill, retrieval of relevant tokens, full-depth
//! recomputation and greedy decoding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embeddings::{EmbeddingStore, HeadSpec, Precision, Projection};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheLimits, EvictionPolicy, KVCacheSet};
use crate::model::{greedy, ChunkOutput, ForwardOptions, Model};
use crate::retrieval::{self, SelectionSet, SignificanceScores};
use crate::tokenizer::{is_byte_special, TokenId, EOS, SEP};

/// How the input is cut into context and query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySplit {
    /// Query starts at the last occurrence of this token, which it keeps.
    Separator(TokenId),
    /// Query is the final `n` tokens.
    Suffix(usize),
}

impl Default for QuerySplit {
    fn default() -> Self {
        QuerySplit::Separator(SEP)
    }
}

impl fmt::Display for QuerySplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuerySplit::Separator(t) if *t == SEP => write!(f, "sep"),
            QuerySplit::Separator(t) => write!(f, "sep:{t}"),
            QuerySplit::Suffix(n) => write!(f, "suffix:{n}"),
        }
    }
}

impl FromStr for QuerySplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("query split {s:?}; expected sep, sep:ID or suffix:N"));
        match s.split_once(':') {
            None if s == "sep" => Ok(QuerySplit::Separator(SEP)),
            Some(("sep", id)) => id.parse().map(QuerySplit::Separator).map_err(|_| bad()),
            Some(("suffix", n)) => n.parse().map(QuerySplit::Suffix).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl Serialize for QuerySplit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuerySplit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_size: usize,
    pub cache_budget: usize,
    pub sink_len: usize,
    pub recent_len: usize,
    pub eviction: EvictionPolicy,
    pub selected_heads: Vec<HeadSpec>,
    /// Defaults to one past the highest selected layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_layer: Option<usize>,
    pub recomputation_budget: usize,
    pub query_split: QuerySplit,
    pub neighbor_window: usize,
    pub observer_window: usize,
    /// Trailing query tokens that are excluded from scoring.
    pub generation_prefix_len: usize,
    pub embedding_precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            chunk_size: 512,
            cache_budget: 512,
            sink_len: 16,
            recent_len: 16,
            eviction: EvictionPolicy::H2o,
            selected_heads: vec![HeadSpec::value(0, 0)],
            exit_layer: None,
            recomputation_budget: 128,
            query_split: QuerySplit::default(),
            neighbor_window: 8,
            observer_window: 16,
            generation_prefix_len: 0,
            embedding_precision: Precision::F16,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn limits(&self) -> CacheLimits {
        CacheLimits {
            budget: self.cache_budget,
            sink_len: self.sink_len,
            recent_len: self.recent_len,
        }
    }

    /// Effective exit layer after validation against `model_layers`.
    pub fn exit_layer(&self, model_layers: usize) -> Result<usize> {
        let derived = self
            .selected_heads
            .iter()
            .map(|h| h.layer + 1)
            .max()
            .ok_or_else(|| Error::Config("no heads selected".into()))?;
        let exit = self.exit_layer.unwrap_or(derived);
        if exit < derived || exit > model_layers {
            return Err(Error::Config(format!(
                "exit layer {exit} must lie in {derived}..={model_layers}"
            )));
        }
        Ok(exit)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        self.limits().validate()?;
        for h in &self.selected_heads {
            h.validate(&model.config)?;
            if h.projection == Projection::Attention {
                return Err(Error::Config(format!(
                    "head {h}: attention scores cannot be stored as embeddings"
                )));
            }
        }
        self.exit_layer(model.config.n_layers)?;
        Ok(())
    }
}

/// Exact operation counters for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkStats {
    /// Token-layer forward passes.
    pub layer_executions: u64,
    /// Unmasked query-row by cache-entry score evaluations, summed over layers.
    pub attention_score_ops: u64,
    pub peak_cache_entries: Vec<usize>,
    pub embedding_bytes: u64,
    pub recomputed_tokens: u64,
    pub decode_steps: u64,
    pub n_chunks: u64,
}

impl WorkStats {
    fn observe_cache(&mut self, cache: &KVCacheSet) {
        if self.peak_cache_entries.len() < cache.n_layers() {
            self.peak_cache_entries.resize(cache.n_layers(), 0);
        }
        for (peak, len) in self.peak_cache_entries.iter_mut().zip(cache.lens()) {
            *peak = (*peak).max(len);
        }
    }
}

/// Recurrent chunked forwarding over budgeted caches: each fed chunk is
/// forwarded onto the caches, its observer attention is added to the
/// cumulative scores, and every executed layer is compressed and renumbered.
pub struct CompressivePass<'m, 'o> {
    model: &'m Model,
    pub cache: KVCacheSet,
    opts: ForwardOptions<'o>,
    policy: EvictionPolicy,
    offset: usize,
    pub stats: WorkStats,
}

impl<'m, 'o> CompressivePass<'m, 'o> {
    pub fn new(model: &'m Model, limits: CacheLimits, policy: EvictionPolicy, opts: ForwardOptions<'o>) -> Self {
        CompressivePass {
            model,
            cache: KVCacheSet::new(&model.config, limits),
            opts,
            policy,
            offset: 0,
            stats: WorkStats::default(),
        }
    }

    /// Tokens fed so far.
    pub fn consumed(&self) -> usize {
        self.offset
    }

    pub fn feed(&mut self, chunk: &[TokenId]) -> Result<ChunkOutput> {
        let positions: Vec<usize> = (self.offset..self.offset + chunk.len()).collect();
        let out = self
            .model
            .forward_chunk(chunk, Some(&positions), &mut self.cache, &self.opts)?;
        self.stats.observe_cache(&self.cache);
        for (layer, att) in self.cache.layers.iter_mut().zip(&out.attention) {
            layer.accumulate_scores(&att.observer)?;
        }
        let finals: Vec<Vec<f32>> = out.attention.iter().map(|a| a.final_row.clone()).collect();
        self.cache.compress_layers(self.policy, &finals)?;
        self.stats.layer_executions += (chunk.len() * self.opts.exit_layer) as u64;
        self.stats.attention_score_ops += out.attention_ops;
        self.stats.n_chunks += 1;
        self.offset += chunk.len();
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PrefillResult {
    pub cache: KVCacheSet,
    pub selection: SelectionSet,
    pub scores: SignificanceScores,
    pub last_logits: Vec<f32>,
    pub stats: WorkStats,
    pub context_len: usize,
}

pub fn split_query(tokens: &[TokenId], rule: QuerySplit) -> Result<(&[TokenId], &[TokenId])> {
    if tokens.is_empty() {
        return Err(Error::Split("empty input".into()));
    }
    let at = match rule {
        QuerySplit::Separator(sep) => tokens
            .iter()
            .rposition(|&t| t == sep)
            .ok_or_else(|| Error::Split(format!("separator token {sep} not found")))?,
        QuerySplit::Suffix(n) if n == 0 || n >= tokens.len() => {
            return Err(Error::Split(format!(
                "query suffix of {n} tokens for an input of {}",
                tokens.len()
            )))
        }
        QuerySplit::Suffix(n) => tokens.len() - n,
    };
    Ok(tokens.split_at(at))
}

/// Compress, gather and recompute `tokens`, leaving a cache ready to decode.
pub fn reform_prefill(model: &Model, tokens: &[TokenId], cfg: &PipelineConfig) -> Result<PrefillResult> {
    cfg.validate(model)?;
    let n_layers = model.config.n_layers;
    let exit = cfg.exit_layer(n_layers)?;
    let (context, query) = split_query(tokens, cfg.query_split)?;

    let mut store = EmbeddingStore::for_model(&model.config, &cfg.selected_heads, cfg.embedding_precision);
    let mut pass = CompressivePass::new(
        model,
        cfg.limits(),
        cfg.eviction,
        ForwardOptions {
            exit_layer: exit,
            taps: &cfg.selected_heads,
            observer_window: cfg.observer_window,
            all_logits: false,
        },
    );
    for chunk in context.chunks(cfg.chunk_size).chain([query]) {
        let out = pass.feed(chunk)?;
        store.append_chunk(&out.tapped, chunk.len())?;
    }
    let mut stats = pass.stats;
    stats.embedding_bytes = store.size_bytes() as u64;

    let dim = store.dim();
    let context_len = context.len();
    let prefix_from = query.len().saturating_sub(cfg.generation_prefix_len);
    let mask: Vec<bool> = query
        .iter()
        .enumerate()
        .map(|(i, &t)| i < prefix_from && !is_byte_special(t))
        .collect();
    let raw = retrieval::score(
        &store.rows(context_len..tokens.len()),
        &store.rows(0..context_len),
        dim,
        &mask,
    )?;
    let scores = SignificanceScores {
        scores: retrieval::smooth_max(&raw.scores, cfg.neighbor_window),
        neighbor_window: Some(cfg.neighbor_window),
    };
    let selection = retrieval::select(
        &scores.scores,
        cfg.recomputation_budget,
        cfg.sink_len,
        cfg.recent_len,
        tokens.len(),
    )?;
    log::debug!(
        "{} chunks, selected {} of {} tokens",
        stats.n_chunks,
        selection.len(),
        tokens.len()
    );

    let gathered = retrieval::gather(tokens, &selection)?;
    let mut cache = KVCacheSet::unbounded(&model.config);
    let out = model.forward_chunk(
        &gathered,
        Some(&selection.indices),
        &mut cache,
        &ForwardOptions::full(n_layers),
    )?;
    stats.observe_cache(&cache);
    stats.layer_executions += (gathered.len() * n_layers) as u64;
    stats.attention_score_ops += out.attention_ops;
    stats.recomputed_tokens = gathered.len() as u64;
    let last_logits = out.last_logits().expect("full-depth pass").to_vec();

    Ok(PrefillResult {
        cache,
        selection,
        scores,
        last_logits,
        stats,
        context_len,
    })
}

/// Greedy decoding from prefilled `logits`. Every emitted token is fed back
/// so the cache ends holding the whole output; EOS stops and is not emitted.
pub fn decode_greedy(
    model: &Model,
    cache: &mut KVCacheSet,
    logits: &[f32],
    max_new_tokens: usize,
    stats: &mut WorkStats,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    if max_new_tokens == 0 {
        return Ok(out);
    }
    let mut logits = logits.to_vec();
    loop {
        let t = greedy(&logits);
        if t == EOS {
            break;
        }
        out.push(t);
        stats.attention_score_ops += cache.lens().iter().map(|&l| l as u64 + 1).sum::<u64>();
        logits = model.decode_token(cache, t)?;
        stats.observe_cache(cache);
        stats.decode_steps += 1;
        stats.layer_executions += model.config.n_layers as u64;
        if out.len() == max_new_tokens {
            break;
        }
    }
    Ok(out)
}

pub fn generate(model: &Model, prefill: &mut PrefillResult, max_new_tokens: usize) -> Result<Vec<TokenId>> {
    let logits = std::mem::take(&mut prefill.last_logits);
    let out = decode_greedy(model, &mut prefill.cache, &logits, max_new_tokens, &mut prefill.stats);
    prefill.last_logits = logits;
    out
}

/// Baseline: one full-depth pass over the whole input, then greedy decoding.
pub fn dense_generate(model: &Model, tokens: &[TokenId], max_new_tokens: usize) -> Result<(Vec<TokenId>, WorkStats)> {
    let (out, mut cache) = model.prefill_dense(tokens, false)?;
    let mut stats = WorkStats {
        layer_executions: (tokens.len() * model.config.n_layers) as u64,
        attention_score_ops: out.attention_ops,
        n_chunks: 1,
        ..WorkStats::default()
    };
    stats.observe_cache(&cache);
    let logits = out.last_logits().expect("full-depth pass");
    let generated = decode_greedy(model, &mut cache, logits, max_new_tokens, &mut stats)?;
    Ok((generated, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rules() {
        let t: Vec<TokenId> = (0..10).collect();
        let (c, q) = split_query(&t, QuerySplit::Suffix(4)).unwrap();
        assert_eq!((c.len(), q.len()), (6, 4));
        let mut s = t.clone();
        s[6] = SEP;
        let (c, q) = split_query(&s, QuerySplit::Separator(SEP)).unwrap();
        assert_eq!(c, &s[..6]);
        assert_eq!(q[0], SEP);
        assert_eq!(&q[1..], &s[7..]);
        assert!(matches!(
            split_query(&t, QuerySplit::Separator(SEP)),
            Err(Error::Split(_))
        ));
        assert!(matches!(split_query(&t, QuerySplit::Suffix(10)), Err(Error::Split(_))));
        assert!(matches!(split_query(&[], QuerySplit::Suffix(1)), Err(Error::Split(_))));
    }

    #[test]
    fn query_split_text_forms() {
        for s in ["sep", "sep:7", "suffix:12"] {
            assert_eq!(s.parse::<QuerySplit>().unwrap().to_string(), s);
        }
        assert!("suffix".parse::<QuerySplit>().is_err());
        assert!("tail:3".parse::<QuerySplit>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = PipelineConfig {
            selected_heads: vec!["0:v:1".parse().unwrap(), "1:q:3".parse().unwrap()],
            query_split: QuerySplit::Suffix(5),
            ..PipelineConfig::default()
        };
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.exit_layer(4).unwrap(), 2);
        let partial = PipelineConfig::from_toml("chunk_size = 64\neviction = \"tova\"\n").unwrap();
        assert_eq!(partial.chunk_size, 64);
        assert_eq!(partial.eviction, EvictionPolicy::Tova);
        assert!(matches!(PipelineConfig::from_toml("chunk = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn exit_layer_bounds() {
        let cfg = PipelineConfig {
            selected_heads: vec!["2:k:0".parse().unwrap()],
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.exit_layer(4).unwrap(), 3);
        let explicit = PipelineConfig {
            exit_layer: Some(4),
            ..cfg.clone()
        };
        assert_eq!(explicit.exit_layer(4).unwrap(), 4);
        let low = PipelineConfig {
            exit_layer: Some(2),
            ..cfg
        };
        assert!(matches!(low.exit_layer(4), Err(Error::Config(_))));
    }
}
