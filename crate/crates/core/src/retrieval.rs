//! Token-level significance scoring and budgeted selection.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, l2_norm};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceScores {
    /// One score per context token.
    pub scores: Vec<f32>,
    /// Neighbour max-pool half-width applied, if any.
    pub neighbor_window: Option<usize>,
}

/// Sorted original positions chosen for recomputation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet {
    pub indices: Vec<usize>,
    pub budget: usize,
    pub sink_len: usize,
    pub recent_len: usize,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.indices.binary_search(&pos).is_ok()
    }
}

/// For each context row, the best cosine against any unmasked query row.
///
/// `query_embs` is `[q, dim]`, `context_embs` is `[n, dim]`.
pub fn score(query_embs: &[f32], context_embs: &[f32], dim: usize, valid_query: &[bool]) -> Result<SignificanceScores> {
    if dim == 0 || !query_embs.len().is_multiple_of(dim) || !context_embs.len().is_multiple_of(dim) {
        return Err(Error::Schema(format!(
            "embedding buffers of {} and {} values do not match dimension {dim}",
            query_embs.len(),
            context_embs.len()
        )));
    }
    let q_rows = query_embs.len() / dim;
    if valid_query.len() != q_rows {
        return Err(Error::Schema(format!(
            "query mask has {} entries for {q_rows} query rows",
            valid_query.len()
        )));
    }
    let queries: Vec<(&[f32], f32)> = query_embs
        .chunks(dim)
        .zip(valid_query)
        .filter(|(_, &ok)| ok)
        .map(|(q, _)| (q, l2_norm(q)))
        .collect();
    if queries.is_empty() {
        return Err(Error::Query("every query token is masked".into()));
    }
    let n = context_embs.len() / dim;
    let scores = par::map_range(n, |i| {
        let c = &context_embs[i * dim..(i + 1) * dim];
        let nc = l2_norm(c);
        queries
            .iter()
            .map(|&(q, nq)| {
                if nq == 0.0 || nc == 0.0 {
                    0.0
                } else {
                    dot(q, c) / (nq * nc)
                }
            })
            .fold(f32::NEG_INFINITY, f32::max)
    });
    Ok(SignificanceScores {
        scores,
        neighbor_window: None,
    })
}

/// `out[i] = max(scores[i-window ..= i+window])`, clipped to bounds. O(n).
pub fn smooth_max(scores: &[f32], window: usize) -> Vec<f32> {
    let n = scores.len();
    if window == 0 || n == 0 {
        return scores.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    // indices with decreasing values
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    for i in 0..n {
        let hi = (i + window).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&b| scores[b] <= scores[next]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(window);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        out.push(scores[*dq.front().expect("window is non-empty")]);
    }
    out
}

/// `out[i]` = mean of the clipped symmetric window of half-width `window`.
pub fn smooth_mean(scores: &[f32], window: usize) -> Vec<f32> {
    let n = scores.len();
    if window == 0 || n == 0 {
        return scores.to_vec();
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    for &s in scores {
        prefix.push(prefix.last().unwrap() + s as f64);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(n - 1);
            ((prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64) as f32
        })
        .collect()
}

/// Choose positions to recompute.
///
/// `scores` covers the context prefix `0..scores.len()`; positions from there
/// to `input_len` are query tokens. The first `sink_len`, the last
/// `recent_len` and all query positions are forced; the rest of
/// `total_budget` goes to the highest-scoring context positions, earlier
/// positions winning ties.
pub fn select(
    scores: &[f32],
    total_budget: usize,
    sink_len: usize,
    recent_len: usize,
    input_len: usize,
) -> Result<SelectionSet> {
    let context_len = scores.len();
    if context_len > input_len {
        return Err(Error::Input(format!(
            "{context_len} scores for an input of {input_len} tokens"
        )));
    }
    let mk = |indices| SelectionSet {
        indices,
        budget: total_budget,
        sink_len,
        recent_len,
    };
    if total_budget >= input_len {
        return Ok(mk((0..input_len).collect()));
    }
    let recent_start = input_len.saturating_sub(recent_len);
    let forced_from = recent_start.min(context_len);
    let is_forced = |p: usize| p < sink_len || p >= forced_from;
    let forced = sink_len.min(forced_from) + (input_len - forced_from);
    if forced > total_budget {
        return Err(Error::Config(format!(
            "recomputation budget {total_budget} cannot hold {forced} forced tokens \
             (sink {sink_len}, recent {recent_len}, query {})",
            input_len - context_len
        )));
    }
    let mut candidates: Vec<usize> = (0..context_len).filter(|&p| !is_forced(p)).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(total_budget - forced);

    let mut indices: Vec<usize> = (0..input_len).filter(|&p| is_forced(p)).collect();
    indices.extend(candidates);
    indices.sort_unstable();
    Ok(mk(indices))
}

/// Tokens at the selected positions, in input order.
pub fn gather(tokens: &[TokenId], selection: &SelectionSet) -> Result<Vec<TokenId>> {
    selection
        .indices
        .iter()
        .map(|&i| {
            tokens
                .get(i)
                .copied()
                .ok_or_else(|| Error::Internal(format!("selected index {i} beyond input of {}", tokens.len())))
        })
        .collect()
}

/// `position \t score \t selected` rows for every context position.
pub fn selection_tsv(scores: &[f32], selection: &SelectionSet) -> String {
    let mut out = String::from("position\tscore\tselected\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{s:.6}\t{}", u8::from(selection.contains(i)));
    }
    out
}
