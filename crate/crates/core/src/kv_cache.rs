//! Budgeted per-layer KV cache.
//!
//! Keys are stored *before* rotary encoding together with two position IDs:
//! the token's index in the full input (`original_position`) and the ID used
//! for rotary encoding at attention time (`assigned_position`). Compression
//! keeps the sink and recent entries and fills the remaining budget according
//! to an [`EvictionPolicy`]; [`LayerKVCache::reassign_positions`] then renumbers
//! the survivors `0..len`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::rope::Rope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    /// Keep entries with the largest cumulative attention mass.
    #[default]
    H2o,
    /// Keep only sink and most recent entries.
    StreamingLlm,
    /// Keep entries the chunk's final token attends to most.
    Tova,
}

impl EvictionPolicy {
    pub const ALL: [EvictionPolicy; 3] = [Self::H2o, Self::StreamingLlm, Self::Tova];

    pub fn name(self) -> &'static str {
        match self {
            Self::H2o => "h2o",
            Self::StreamingLlm => "streamingllm",
            Self::Tova => "tova",
        }
    }
}

impl std::fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h2o" => Ok(Self::H2o),
            "streamingllm" | "streaming" => Ok(Self::StreamingLlm),
            "tova" => Ok(Self::Tova),
            other => Err(Error::Config(format!("unknown eviction policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLimits {
    pub budget: usize,
    pub sink_len: usize,
    pub recent_len: usize,
}

impl CacheLimits {
    pub const UNBOUNDED: CacheLimits = CacheLimits {
        budget: usize::MAX,
        sink_len: 0,
        recent_len: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.budget < self.sink_len.saturating_add(self.recent_len) {
            return Err(Error::Config(format!(
                "cache budget {} is smaller than sink {} + recent {}",
                self.budget, self.sink_len, self.recent_len
            )));
        }
        Ok(())
    }
}

/// Borrowed view of one cache slot.
#[derive(Debug, Clone, Copy)]
pub struct CacheEntry<'a> {
    pub key: &'a [f32],
    pub value: &'a [f32],
    pub original_position: usize,
    pub assigned_position: usize,
    pub cum_score: f32,
}

#[derive(Debug, Clone)]
pub struct LayerKVCache {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    original: Vec<usize>,
    assigned: Vec<usize>,
    cum_score: Vec<f32>,
    limits: CacheLimits,
    // Memo of keys rotated at `rot_pos`; rows whose position differs from
    // `assigned` are stale.
    rot_keys: Vec<f32>,
    rot_pos: Vec<usize>,
}

impl PartialEq for LayerKVCache {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.keys == other.keys
            && self.values == other.values
            && self.original == other.original
            && self.assigned == other.assigned
            && self.cum_score == other.cum_score
            && self.limits == other.limits
    }
}

impl LayerKVCache {
    /// `width` is `n_kv_heads × head_dim`.
    pub fn new(width: usize, limits: CacheLimits) -> Self {
        Self {
            width,
            keys: Vec::new(),
            values: Vec::new(),
            original: Vec::new(),
            assigned: Vec::new(),
            cum_score: Vec::new(),
            limits,
            rot_keys: Vec::new(),
            rot_pos: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn limits(&self) -> CacheLimits {
        self.limits
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn original_positions(&self) -> &[usize] {
        &self.original
    }

    pub fn assigned_positions(&self) -> &[usize] {
        &self.assigned
    }

    pub fn cum_scores(&self) -> &[f32] {
        &self.cum_score
    }

    pub fn entry(&self, i: usize) -> CacheEntry<'_> {
        let w = self.width;
        CacheEntry {
            key: &self.keys[i * w..(i + 1) * w],
            value: &self.values[i * w..(i + 1) * w],
            original_position: self.original[i],
            assigned_position: self.assigned[i],
            cum_score: self.cum_score[i],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = CacheEntry<'_>> {
        (0..self.len()).map(move |i| self.entry(i))
    }

    /// Rotary position the next appended entry receives.
    pub fn next_assigned(&self) -> usize {
        self.assigned.last().map_or(0, |p| p + 1)
    }

    /// Append rows of pre-rotary keys and values. New entries get consecutive
    /// assigned positions following the last one and a zero score.
    pub fn append(&mut self, keys: &[f32], values: &[f32], original_positions: &[usize]) -> Result<()> {
        let n = original_positions.len();
        if keys.len() != n * self.width || values.len() != n * self.width {
            return Err(Error::Input(format!(
                "append of {n} entries needs {} key and value floats, got {} and {}",
                n * self.width,
                keys.len(),
                values.len()
            )));
        }
        let mut last = self.original.last().copied();
        for &p in original_positions {
            if last.is_some_and(|l| p <= l) {
                return Err(Error::Input(format!(
                    "original position {p} does not follow {}",
                    last.unwrap()
                )));
            }
            last = Some(p);
        }
        let start = self.next_assigned();
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.original.extend_from_slice(original_positions);
        self.assigned.extend(start..start + n);
        self.cum_score.extend(std::iter::repeat_n(0.0, n));
        self.rot_keys.extend_from_slice(keys);
        self.rot_pos.extend(std::iter::repeat_n(usize::MAX, n));
        Ok(())
    }

    /// Bring the rotated-key memo up to date with the assigned positions.
    pub fn refresh_rotation(&mut self, rope: &Rope) {
        let w = self.width;
        let mut i = 0;
        while i < self.len() {
            if self.rot_pos[i] == self.assigned[i] {
                i += 1;
                continue;
            }
            // rotate the maximal stale run in one call
            let start = i;
            while i < self.len() && self.rot_pos[i] != self.assigned[i] {
                i += 1;
            }
            let rows = &mut self.rot_keys[start * w..i * w];
            rows.copy_from_slice(&self.keys[start * w..i * w]);
            rope.rotate_rows(rows, &self.assigned[start..i]);
            self.rot_pos[start..i].copy_from_slice(&self.assigned[start..i]);
        }
    }

    /// Keys with rotary encoding at their assigned positions. Call
    /// [`Self::refresh_rotation`] first.
    pub fn rotated_keys(&self) -> &[f32] {
        debug_assert!(self.rot_pos == self.assigned, "rotation memo is stale");
        &self.rot_keys
    }

    /// Add observed attention mass (already summed over heads) to each entry.
    pub fn accumulate_scores(&mut self, observer_attention: &[f32]) -> Result<()> {
        if observer_attention.len() != self.len() {
            return Err(Error::Input(format!(
                "observer attention has {} values for {} entries",
                observer_attention.len(),
                self.len()
            )));
        }
        if let Some(bad) = observer_attention.iter().find(|x| x.is_nan() || **x < 0.0) {
            return Err(Error::Input(format!("attention mass must be non-negative, got {bad}")));
        }
        for (s, a) in self.cum_score.iter_mut().zip(observer_attention) {
            *s += a;
        }
        Ok(())
    }

    /// Evict down to the budget. Returns evicted original positions, ascending.
    ///
    /// `final_token_attention` is required by [`EvictionPolicy::Tova`] and
    /// ignored otherwise.
    pub fn compress(&mut self, policy: EvictionPolicy, final_token_attention: Option<&[f32]>) -> Result<Vec<usize>> {
        self.limits.validate()?;
        let n = self.len();
        let CacheLimits {
            budget,
            sink_len,
            recent_len,
        } = self.limits;
        if n <= budget {
            return Ok(Vec::new());
        }
        let middle = sink_len..n - recent_len;
        let keep_middle = budget - sink_len - recent_len;

        let mut ranked: Vec<usize> = middle.clone().collect();
        match policy {
            EvictionPolicy::H2o => self.rank_by(&mut ranked, &self.cum_score),
            EvictionPolicy::StreamingLlm => ranked.sort_by(|a, b| self.original[*b].cmp(&self.original[*a])),
            EvictionPolicy::Tova => {
                let signal = final_token_attention
                    .ok_or_else(|| Error::Input("TOVA eviction needs the final token's attention".into()))?;
                if signal.len() != n {
                    return Err(Error::Input(format!(
                        "final-token attention has {} values for {n} entries",
                        signal.len()
                    )));
                }
                self.rank_by(&mut ranked, signal);
            }
        }

        let mut keep = vec![true; n];
        let mut evicted = Vec::with_capacity(n - budget);
        for &i in &ranked[keep_middle..] {
            keep[i] = false;
        }
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                evicted.push(self.original[i]);
            }
        }
        self.retain(&keep);
        Ok(evicted)
    }

    /// Sort candidate indices by score descending, later positions first on ties.
    fn rank_by(&self, idx: &mut [usize], score: &[f32]) {
        idx.sort_by(|&a, &b| {
            score[b]
                .total_cmp(&score[a])
                .then(self.original[b].cmp(&self.original[a]))
        });
    }

    fn retain(&mut self, keep: &[bool]) {
        let w = self.width;
        let mut dst = 0;
        for (src, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            if dst != src {
                self.keys.copy_within(src * w..(src + 1) * w, dst * w);
                self.values.copy_within(src * w..(src + 1) * w, dst * w);
                self.original[dst] = self.original[src];
                self.assigned[dst] = self.assigned[src];
                self.cum_score[dst] = self.cum_score[src];
                self.rot_keys.copy_within(src * w..(src + 1) * w, dst * w);
                self.rot_pos[dst] = self.rot_pos[src];
            }
            dst += 1;
        }
        self.keys.truncate(dst * w);
        self.values.truncate(dst * w);
        self.original.truncate(dst);
        self.assigned.truncate(dst);
        self.cum_score.truncate(dst);
        self.rot_keys.truncate(dst * w);
        self.rot_pos.truncate(dst);
    }

    /// Renumber assigned positions to `0..len` in entry order.
    pub fn reassign_positions(&mut self) {
        for (i, p) in self.assigned.iter_mut().enumerate() {
            *p = i;
        }
    }

    /// Text table of `(original, assigned, cum_score)` rows.
    pub fn debug_table(&self) -> String {
        let mut out = String::from("original\tassigned\tcum_score\n");
        for e in self.entries() {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}",
                e.original_position, e.assigned_position, e.cum_score
            );
        }
        out
    }
}

/// One [`LayerKVCache`] per transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheSet {
    pub layers: Vec<LayerKVCache>,
}

impl KVCacheSet {
    pub fn new(cfg: &ModelConfig, limits: CacheLimits) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| LayerKVCache::new(cfg.kv_dim(), limits))
                .collect(),
        }
    }

    pub fn unbounded(cfg: &ModelConfig) -> Self {
        Self::new(cfg, CacheLimits::UNBOUNDED)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKVCache::len).collect()
    }

    /// Compress and renumber the first `signals.len()` layers; layers are
    /// processed independently (and in parallel when enabled).
    pub fn compress_layers(
        &mut self,
        policy: EvictionPolicy,
        final_token_attention: &[Vec<f32>],
    ) -> Result<Vec<Vec<usize>>> {
        let n = final_token_attention.len();
        type Job<'a> = (&'a mut LayerKVCache, &'a [f32], Result<Vec<usize>>);
        let mut jobs: Vec<Job> = self.layers[..n]
            .iter_mut()
            .zip(final_token_attention)
            .map(|(layer, signal)| (layer, signal.as_slice(), Ok(Vec::new())))
            .collect();
        par::for_each_mut(&mut jobs, |(layer, signal, out)| {
            *out = layer
                .compress(policy, Some(signal))
                .inspect(|_| layer.reassign_positions());
        });
        jobs.into_iter().map(|(_, _, r)| r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_with(scores: &[f32], limits: CacheLimits) -> LayerKVCache {
        let n = scores.len();
        let mut c = LayerKVCache::new(1, limits);
        let keys: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let pos: Vec<usize> = (0..n).collect();
        c.append(&keys, &keys, &pos).unwrap();
        c.accumulate_scores(scores).unwrap();
        c
    }

    fn limits(budget: usize, sink: usize, recent: usize) -> CacheLimits {
        CacheLimits {
            budget,
            sink_len: sink,
            recent_len: recent,
        }
    }

    #[test]
    fn append_sets_zero_scores_and_order() {
        let mut c = LayerKVCache::new(2, CacheLimits::UNBOUNDED);
        c.append(&[0.0; 6], &[1.0; 6], &[0, 1, 2]).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.cum_scores().iter().all(|&s| s == 0.0));
        c.append(&[0.0; 4], &[1.0; 4], &[7, 9]).unwrap();
        assert_eq!(c.original_positions(), &[0, 1, 2, 7, 9]);
        assert_eq!(c.assigned_positions(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn append_rejects_non_monotone_positions() {
        let mut c = LayerKVCache::new(1, CacheLimits::UNBOUNDED);
        c.append(&[0.0; 2], &[0.0; 2], &[3, 4]).unwrap();
        assert!(matches!(c.append(&[0.0], &[0.0], &[4]), Err(Error::Input(_))));
        assert!(matches!(c.append(&[0.0; 2], &[0.0; 2], &[6, 5]), Err(Error::Input(_))));
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn accumulate_is_additive_and_validated() {
        let mut c = cache_with(&[0.0; 4], CacheLimits::UNBOUNDED);
        c.accumulate_scores(&[0.0; 4]).unwrap();
        assert_eq!(c.cum_scores(), &[0.0; 4]);
        c.accumulate_scores(&[1.0, 2.0, 0.5, 0.0]).unwrap();
        c.accumulate_scores(&[0.5, 0.0, 0.5, 3.0]).unwrap();
        assert_eq!(c.cum_scores(), &[1.5, 2.0, 1.0, 3.0]);
        assert!(matches!(c.accumulate_scores(&[1.0; 3]), Err(Error::Input(_))));
        assert!(matches!(
            c.accumulate_scores(&[1.0, -0.1, 0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn uniform_observers_add_two_h_quarters() {
        // Two observer rows, H heads, uniform softmax over 4 entries.
        let heads = 3;
        let row = {
            let mut v = vec![0.7f32; 4];
            crate::tensor::softmax_in_place(&mut v);
            v
        };
        let mut mass = vec![0.0f32; 4];
        for _ in 0..2 * heads {
            for (m, r) in mass.iter_mut().zip(&row) {
                *m += r;
            }
        }
        let mut c = cache_with(&[0.0; 4], CacheLimits::UNBOUNDED);
        c.accumulate_scores(&mass).unwrap();
        for s in c.cum_scores() {
            assert!((s - 2.0 * heads as f32 * 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn compress_at_budget_is_noop() {
        let mut c = cache_with(&[1.0; 6], limits(6, 2, 2));
        let before = c.clone();
        assert!(c.compress(EvictionPolicy::H2o, None).unwrap().is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn h2o_evicts_lowest_middle_scores() {
        // middle (positions 2..6) scores [5, 1, 9, 2]
        let mut c = cache_with(&[0.0, 0.0, 5.0, 1.0, 9.0, 2.0, 0.0, 0.0], limits(6, 2, 2));
        let evicted = c.compress(EvictionPolicy::H2o, None).unwrap();
        assert_eq!(evicted, vec![3, 5]);
        assert_eq!(c.original_positions(), &[0, 1, 2, 4, 6, 7]);
    }

    #[test]
    fn streaming_keeps_latest_positions() {
        let mut c = cache_with(&[0.0, 0.0, 5.0, 1.0, 9.0, 2.0, 0.0, 0.0], limits(6, 2, 2));
        let evicted = c.compress(EvictionPolicy::StreamingLlm, None).unwrap();
        assert_eq!(evicted, vec![2, 3]);
        assert_eq!(c.original_positions(), &[0, 1, 4, 5, 6, 7]);
    }

    #[test]
    fn tova_uses_final_token_signal() {
        let mut c = cache_with(&[0.0; 8], limits(6, 2, 2));
        let signal = [0.0, 0.0, 0.1, 0.4, 0.3, 0.2, 0.0, 0.0];
        let evicted = c.compress(EvictionPolicy::Tova, Some(&signal)).unwrap();
        assert_eq!(evicted, vec![2, 5]);
        assert!(matches!(
            cache_with(&[0.0; 8], limits(6, 2, 2)).compress(EvictionPolicy::Tova, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ties_prefer_recent_entries() {
        let mut c = cache_with(&[0.0; 8], limits(5, 1, 1));
        let evicted = c.compress(EvictionPolicy::H2o, None).unwrap();
        assert_eq!(evicted, vec![1, 2, 3]);
    }

    #[test]
    fn budget_smaller_than_forced_is_config_error() {
        let mut c = cache_with(&[0.0; 8], limits(3, 2, 2));
        assert!(matches!(c.compress(EvictionPolicy::H2o, None), Err(Error::Config(_))));
    }

    #[test]
    fn reassign_makes_positions_consecutive() {
        let mut c = LayerKVCache::new(1, CacheLimits::UNBOUNDED);
        c.append(&[0.0; 3], &[0.0; 3], &[0, 5, 9]).unwrap();
        c.assigned = vec![0, 5, 9];
        c.reassign_positions();
        assert_eq!(c.assigned_positions(), &[0, 1, 2]);
        assert_eq!(c.original_positions(), &[0, 5, 9]);
        let again = c.clone();
        c.reassign_positions();
        assert_eq!(c, again);

        let mut empty = LayerKVCache::new(1, CacheLimits::UNBOUNDED);
        empty.reassign_positions();
        assert!(empty.is_empty());
    }

    #[test]
    fn evicted_scores_do_not_come_back() {
        let mut c = cache_with(&[0.0, 4.0, 1.0, 0.0], limits(3, 1, 1));
        c.compress(EvictionPolicy::H2o, None).unwrap();
        assert_eq!(c.original_positions(), &[0, 1, 3]);
        assert_eq!(c.cum_scores(), &[0.0, 4.0, 0.0]);
        assert_eq!(c.keys(), &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn debug_table_lists_rows() {
        let c = cache_with(&[0.5, 1.0], CacheLimits::UNBOUNDED);
        let t = c.debug_table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("1\t1\t1.000000"));
    }
}
