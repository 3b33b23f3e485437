//! Comparison methods, needle-in-a-haystack grids, head ablations and work
//! reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::HeadSpec;
use crate::error::{Error, Result};
use crate::headfinder::{gen_niah, Needle, Sample};
use crate::kv_cache::EvictionPolicy;
use crate::model::{ForwardOptions, Model};
use crate::par;
use crate::pipeline::{self, decode_greedy, split_query, CompressivePass, PipelineConfig, WorkStats};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reform,
    H2o,
    StreamingLlm,
    Tova,
    Truncation,
    Dense,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Reform,
        Method::H2o,
        Method::StreamingLlm,
        Method::Tova,
        Method::Truncation,
        Method::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Reform => "reform",
            Method::H2o => "h2o",
            Method::StreamingLlm => "streamingllm",
            Method::Tova => "tova",
            Method::Truncation => "truncation",
            Method::Dense => "dense",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub output: Vec<TokenId>,
    /// Original positions the decoder can still see (first layer's cache for
    /// eviction baselines).
    pub retained: Vec<usize>,
    pub stats: WorkStats,
}

/// First `budget / 2` and last `budget - budget / 2` positions.
pub fn truncation_keep(len: usize, budget: usize) -> Vec<usize> {
    if len <= budget {
        return (0..len).collect();
    }
    let head = budget / 2;
    (0..head).chain(len - (budget - head)..len).collect()
}

fn evicting_run(
    model: &Model,
    tokens: &[TokenId],
    policy: EvictionPolicy,
    cfg: &PipelineConfig,
    max_new: usize,
) -> Result<MethodRun> {
    cfg.limits().validate()?;
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    let (context, query) = split_query(tokens, cfg.query_split)?;
    let mut pass = CompressivePass::new(
        model,
        cfg.limits(),
        policy,
        ForwardOptions {
            observer_window: cfg.observer_window,
            ..ForwardOptions::full(model.config.n_layers)
        },
    );
    let mut logits = Vec::new();
    for chunk in context.chunks(cfg.chunk_size).chain([query]) {
        logits = pass.feed(chunk)?.last_logits().expect("full depth").to_vec();
    }
    let retained = pass.cache.layers[0].original_positions().to_vec();
    let mut stats = pass.stats;
    let output = decode_greedy(model, &mut pass.cache, &logits, max_new, &mut stats)?;
    Ok(MethodRun {
        output,
        retained,
        stats,
    })
}

pub fn run_method(
    model: &Model,
    tokens: &[TokenId],
    method: Method,
    cfg: &PipelineConfig,
    max_new: usize,
) -> Result<MethodRun> {
    match method {
        Method::Reform => {
            let mut prefill = pipeline::reform_prefill(model, tokens, cfg)?;
            let output = pipeline::generate(model, &mut prefill, max_new)?;
            Ok(MethodRun {
                output,
                retained: prefill.selection.indices,
                stats: prefill.stats,
            })
        }
        Method::H2o => evicting_run(model, tokens, EvictionPolicy::H2o, cfg, max_new),
        Method::StreamingLlm => evicting_run(model, tokens, EvictionPolicy::StreamingLlm, cfg, max_new),
        Method::Tova => evicting_run(model, tokens, EvictionPolicy::Tova, cfg, max_new),
        Method::Truncation => {
            let keep = truncation_keep(tokens.len(), cfg.cache_budget);
            let kept: Vec<TokenId> = keep.iter().map(|&i| tokens[i]).collect();
            let (output, stats) = pipeline::dense_generate(model, &kept, max_new)?;
            Ok(MethodRun {
                output,
                retained: keep,
                stats,
            })
        }
        Method::Dense => {
            let (output, stats) = pipeline::dense_generate(model, tokens, max_new)?;
            Ok(MethodRun {
                output,
                retained: (0..tokens.len()).collect(),
                stats,
            })
        }
    }
}

/// Fraction of gold positions present in `retained` (sorted ascending).
pub fn retention(retained: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    let hit = gold.iter().filter(|g| retained.binary_search(g).is_ok()).count();
    hit as f64 / gold.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub samples: usize,
}

impl Default for NiahGrid {
    fn default() -> Self {
        NiahGrid {
            lengths: vec![1024, 2048, 4096, 8192, 16384],
            depths: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            samples: 5,
        }
    }
}

impl NiahGrid {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        let lengths: Vec<f64> = self.lengths.iter().map(|&l| l as f64).collect();
        if self.lengths.is_empty() || self.depths.is_empty() || self.samples == 0 {
            return Err(Error::Config("grid needs lengths, depths and samples".into()));
        }
        if !increasing(&lengths) || !increasing(&self.depths) {
            return Err(Error::Config("grid axes must be strictly increasing".into()));
        }
        if self.depths.iter().any(|d| !(0.0..=100.0).contains(d)) {
            return Err(Error::Config("depths must lie in 0..=100".into()));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l >= max_positions) {
            return Err(Error::Config(format!(
                "length {l} exceeds the model's {max_positions} positions"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCell {
    pub length: usize,
    pub depth: f64,
    /// Fraction of samples whose output contains the payload.
    pub recall: f64,
    /// Mean fraction of needle tokens visible to the decoder.
    pub needle_retention: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGridResult {
    pub method: Method,
    pub seed: u64,
    pub grid: NiahGrid,
    pub config: PipelineConfig,
    pub cells: Vec<NiahCell>,
}

impl NiahGridResult {
    pub fn cell(&self, length: usize, depth: f64) -> Option<&NiahCell> {
        self.cells.iter().find(|c| c.length == length && c.depth == depth)
    }

    /// Recall table: one row per length, one column per depth.
    pub fn table(&self) -> String {
        let mut headers = vec!["length".to_string()];
        headers.extend(self.grid.depths.iter().map(|d| format!("{d}%")));
        let rows: Vec<Vec<String>> = self
            .grid
            .lengths
            .iter()
            .map(|&l| {
                let mut row = vec![l.to_string()];
                row.extend(
                    self.grid
                        .depths
                        .iter()
                        .map(|&d| self.cell(l, d).map_or("-".into(), |c| format!("{:.2}", c.recall))),
                );
                row
            })
            .collect();
        render_table(&headers, &rows)
    }
}

/// Input stream, payload and needle positions of one NIAH sample.
pub struct NiahCase {
    pub sample: Sample,
    pub max_new: usize,
}

pub fn niah_case(
    tok: &Tokenizer,
    corpus: &str,
    needle: &Needle,
    depth: f64,
    length: usize,
    seed: u64,
) -> Result<NiahCase> {
    let sample = gen_niah(tok, corpus, needle, depth, length, seed)?;
    let max_new = tok.encode(&needle.payload)?.len() + 4;
    Ok(NiahCase { sample, max_new })
}

/// Score one run: payload substring hit and needle retention.
pub fn score_run(tok: &Tokenizer, case: &NiahCase, run: &MethodRun) -> (bool, f64) {
    let text = tok.decode(&run.output);
    (
        text.contains(&case.sample.answer),
        retention(&run.retained, &case.sample.gold_positions()),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_niah(
    model: &Model,
    tok: &Tokenizer,
    corpus: &str,
    needle: &Needle,
    grid: &NiahGrid,
    method: Method,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<NiahGridResult> {
    grid.validate(model.config.max_positions)?;
    let cells: Vec<(usize, f64)> = grid
        .lengths
        .iter()
        .flat_map(|&l| grid.depths.iter().map(move |&d| (l, d)))
        .collect();
    let results = par::map_range(cells.len() * grid.samples, |k| -> Result<(bool, f64)> {
        let (length, depth) = cells[k / grid.samples];
        let case = niah_case(tok, corpus, needle, depth, length, seed.wrapping_add(k as u64))?;
        let run = run_method(model, &case.sample.tokens, method, cfg, case.max_new)?;
        Ok(score_run(tok, &case, &run))
    });
    let results: Vec<(bool, f64)> = results.into_iter().collect::<Result<_>>()?;
    let n = grid.samples as f64;
    let cells = cells
        .iter()
        .zip(results.chunks(grid.samples))
        .map(|(&(length, depth), rs)| NiahCell {
            length,
            depth,
            recall: rs.iter().filter(|r| r.0).count() as f64 / n,
            needle_retention: rs.iter().map(|r| r.1).sum::<f64>() / n,
            samples: grid.samples,
        })
        .collect();
    Ok(NiahGridResult {
        method,
        seed,
        grid: grid.clone(),
        config: cfg.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub head_set: String,
    pub heads: Vec<HeadSpec>,
    pub policy: EvictionPolicy,
    pub recall: f64,
    pub needle_retention: f64,
}

/// The NIAH grid under each `(head set, policy)` pair, averaged over cells.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    model: &Model,
    tok: &Tokenizer,
    corpus: &str,
    needle: &Needle,
    grid: &NiahGrid,
    head_sets: &[(String, Vec<HeadSpec>)],
    policies: &[EvictionPolicy],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, heads) in head_sets {
        for &policy in policies {
            let run_cfg = PipelineConfig {
                selected_heads: heads.clone(),
                eviction: policy,
                exit_layer: None,
                ..cfg.clone()
            };
            let result = run_niah(model, tok, corpus, needle, grid, Method::Reform, &run_cfg, seed)?;
            let n = result.cells.len() as f64;
            rows.push(AblationRow {
                head_set: name.clone(),
                heads: heads.clone(),
                policy,
                recall: result.cells.iter().map(|c| c.recall).sum::<f64>() / n,
                needle_retention: result.cells.iter().map(|c| c.needle_retention).sum::<f64>() / n,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let headers = ["head_set", "heads", "policy", "recall", "needle_retention"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.head_set.clone(),
                r.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
                r.policy.to_string(),
                format!("{:.3}", r.recall),
                format!("{:.3}", r.needle_retention),
            ]
        })
        .collect();
    render_table(&headers, &body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkReport {
    pub method: Method,
    pub input_len: usize,
    pub stats: WorkStats,
}

pub fn work_reports(
    model: &Model,
    tokens: &[TokenId],
    methods: &[Method],
    cfg: &PipelineConfig,
    max_new: usize,
) -> Result<Vec<WorkReport>> {
    methods
        .iter()
        .map(|&method| {
            Ok(WorkReport {
                method,
                input_len: tokens.len(),
                stats: run_method(model, tokens, method, cfg, max_new)?.stats,
            })
        })
        .collect()
}

pub fn work_table(reports: &[WorkReport]) -> String {
    let headers = [
        "method",
        "layer_executions",
        "attention_score_ops",
        "peak_cache_entries",
        "embedding_bytes",
        "recomputed_tokens",
        "decode_steps",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let s = &r.stats;
            vec![
                r.method.to_string(),
                s.layer_executions.to_string(),
                s.attention_score_ops.to_string(),
                s.peak_cache_entries.iter().max().copied().unwrap_or(0).to_string(),
                s.embedding_bytes.to_string(),
                s.recomputed_tokens.to_string(),
                s.decode_steps.to_string(),
            ]
        })
        .collect();
    render_table(&headers, &rows)
}

/// Left-aligned columns separated by two spaces.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(headers);
    for row in rows {
        out.push_str(&line(row));
    }
    out
}
