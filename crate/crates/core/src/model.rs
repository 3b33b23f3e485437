//! Decoder-only transformer forward pass over a KV cache.
//!
//! A chunk of tokens is run through layers `0..exit_layer`. Each executed
//! layer appends the chunk's (pre-rotary) keys and values to its cache and
//! attends causally within the chunk and fully onto earlier cache entries.
//! Alongside hidden states the pass reports, per layer, the attention mass the
//! chunk's last `observer_window` rows place on every cache entry (summed over
//! heads), which feeds cumulative-score eviction.

use std::path::Path;

use crate::config::ModelConfig;
use crate::embeddings::{HeadSpec, Projection};
use crate::error::{Error, Result};
use crate::kv_cache::KVCacheSet;
use crate::par;
use crate::rfwt;
use crate::rope::Rope;
use crate::tensor::{self, dot, matmul_t, rms_norm, silu, softmax_in_place};
use crate::tokenizer::TokenId;
use crate::weights::ModelWeights;

pub const DEFAULT_OBSERVER_WINDOW: usize = 128;

/// Immutable model: configuration, parameters and the rotary table.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    rope: Rope,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub exit_layer: usize,
    pub taps: &'a [HeadSpec],
    pub observer_window: usize,
    /// Produce logits for every row instead of just the last one.
    pub all_logits: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn full(n_layers: usize) -> Self {
        Self {
            exit_layer: n_layers,
            taps: &[],
            observer_window: DEFAULT_OBSERVER_WINDOW,
            all_logits: false,
        }
    }
}

/// Captured states for one tap, `[rows, dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub spec: HeadSpec,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Tap {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Post-projection, pre-rotary Q/K/V head states and post-layer hidden states.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TappedStates {
    pub taps: Vec<Tap>,
}

impl TappedStates {
    pub fn get(&self, spec: &HeadSpec) -> Option<&Tap> {
        self.taps.iter().find(|t| t.spec == *spec)
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Per-layer attention statistics from one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// Column sums over the observer rows and all heads, one per cache entry.
    pub observer: Vec<f32>,
    /// Attention of the chunk's final row, summed over heads.
    pub final_row: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ChunkOutput {
    /// `[rows, d_model]` residual stream after the last executed layer.
    pub hidden: Vec<f32>,
    /// `[rows, vocab]` (or `[1, vocab]` for the last row) when every layer ran.
    pub logits: Option<Vec<f32>>,
    pub tapped: TappedStates,
    pub attention: Vec<LayerAttention>,
    /// Unmasked (query row, cache entry) pairs scored, summed over layers.
    pub attention_ops: u64,
    pub rows: usize,
    pub vocab: usize,
}

impl ChunkOutput {
    /// Logits of the final row.
    pub fn last_logits(&self) -> Option<&[f32]> {
        self.logits.as_deref().map(|l| &l[l.len() - self.vocab..])
    }
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let rope = Rope::new(config.head_dim, config.rope_theta)?;
        Ok(Self { config, weights, rope })
    }

    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init_random(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, w) = rfwt::load(path)?;
        Self::new(cfg, w)
    }

    pub fn save(&self, path: &Path, dtype: rfwt::DType) -> Result<()> {
        rfwt::save(path, &self.config, &self.weights, dtype)
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    /// Run one chunk through layers `0..opts.exit_layer`, extending `cache`.
    ///
    /// `original_positions` defaults to continuing after the last cached
    /// original position.
    pub fn forward_chunk(
        &self,
        tokens: &[TokenId],
        original_positions: Option<&[usize]>,
        cache: &mut KVCacheSet,
        opts: &ForwardOptions<'_>,
    ) -> Result<ChunkOutput> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Input("empty chunk".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if opts.exit_layer > cfg.n_layers {
            return Err(Error::Config(format!(
                "exit layer {} exceeds {} layers",
                opts.exit_layer, cfg.n_layers
            )));
        }
        if cache.n_layers() != cfg.n_layers {
            return Err(Error::Config(format!(
                "cache has {} layers, model has {}",
                cache.n_layers(),
                cfg.n_layers
            )));
        }
        for spec in opts.taps {
            self.check_tap(spec, opts.exit_layer)?;
        }
        let originals: Vec<usize> = match original_positions {
            Some(p) if p.len() != n => {
                return Err(Error::Input(format!("{} original positions for {n} tokens", p.len())))
            }
            Some(p) => p.to_vec(),
            None => {
                let start = cache.layers[0].original_positions().last().map_or(0, |p| p + 1);
                (start..start + n).collect()
            }
        };
        for l in 0..opts.exit_layer {
            let last = cache.layers[l].next_assigned() + n - 1;
            if last >= cfg.max_positions {
                return Err(Error::Position(format!(
                    "layer {l} would use position {last}, limit is {}",
                    cfg.max_positions
                )));
            }
        }

        let d = cfg.d_model;
        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            x.extend_from_slice(self.weights.tok_embeddings.row(t as usize));
        }

        let mut tapped = TappedStates::default();
        let mut attention = Vec::with_capacity(opts.exit_layer);
        let mut attention_ops = 0u64;
        for l in 0..opts.exit_layer {
            let (layer_att, ops) = self.layer_forward(l, &mut x, n, &originals, cache, opts, &mut tapped)?;
            attention.push(layer_att);
            attention_ops += ops;
        }

        let logits = (opts.exit_layer == cfg.n_layers).then(|| {
            let rows = if opts.all_logits { &x[..] } else { &x[(n - 1) * d..] };
            let m = rows.len() / d;
            let xn = rms_norm(rows, d, &self.weights.norm.data, cfg.rms_eps as f32);
            matmul_t(&xn, m, &self.weights.lm_head)
        });

        Ok(ChunkOutput {
            hidden: x,
            logits,
            tapped,
            attention,
            attention_ops,
            rows: n,
            vocab: cfg.vocab_size,
        })
    }

    fn check_tap(&self, spec: &HeadSpec, exit_layer: usize) -> Result<()> {
        let cfg = &self.config;
        if spec.layer >= exit_layer {
            return Err(Error::Config(format!(
                "tap {spec} is at or above exit layer {exit_layer}"
            )));
        }
        let limit = match spec.projection {
            Projection::Query => cfg.n_q_heads,
            Projection::Key | Projection::Value => cfg.n_kv_heads,
            Projection::Hidden => 1,
            Projection::Attention => {
                return Err(Error::Config(format!(
                    "tap {spec}: attention scores are derived from query and key taps"
                )))
            }
        };
        if spec.head >= limit {
            return Err(Error::Config(format!("tap {spec}: head out of range")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        l: usize,
        x: &mut [f32],
        n: usize,
        originals: &[usize],
        cache: &mut KVCacheSet,
        opts: &ForwardOptions<'_>,
        tapped: &mut TappedStates,
    ) -> Result<(LayerAttention, u64)> {
        let cfg = &self.config;
        let lw = &self.weights.layers[l];
        let (d, hd) = (cfg.d_model, cfg.head_dim);
        let eps = cfg.rms_eps as f32;

        let h = rms_norm(x, d, &lw.attn_norm.data, eps);
        let mut q = matmul_t(&h, n, &lw.wq);
        let k = matmul_t(&h, n, &lw.wk);
        let v = matmul_t(&h, n, &lw.wv);

        for spec in opts.taps.iter().filter(|s| s.layer == l) {
            let (src, width) = match spec.projection {
                Projection::Query => (&q, cfg.q_dim()),
                Projection::Key => (&k, cfg.kv_dim()),
                Projection::Value => (&v, cfg.kv_dim()),
                _ => continue,
            };
            let mut data = Vec::with_capacity(n * hd);
            for row in src.chunks(width) {
                data.extend_from_slice(&row[spec.head * hd..(spec.head + 1) * hd]);
            }
            tapped.taps.push(Tap {
                spec: *spec,
                dim: hd,
                data,
            });
        }

        let layer = &mut cache.layers[l];
        layer.append(&k, &v, originals)?;
        let total = layer.len();
        let prior = total - n;
        self.rope.rotate_rows(&mut q, &layer.assigned_positions()[prior..]);
        layer.refresh_rotation(&self.rope);
        let keys = layer.rotated_keys();
        let values = layer.values();

        let kvw = cfg.kv_dim();
        let qw = cfg.q_dim();
        let group = cfg.group_size();
        let scale = 1.0 / (hd as f32).sqrt();
        let observe_from = n - opts.observer_window.min(n);

        // Each row: attention output and, for observer rows, head-summed weights.
        let rows: Vec<(Vec<f32>, Option<Vec<f32>>)> = par::map_range(n, |i| {
            let visible = prior + i + 1;
            let mut out = vec![0.0f32; qw];
            let track = i >= observe_from || i == n - 1;
            let mut mass = track.then(|| vec![0.0f32; visible]);
            let mut p = vec![0.0f32; visible];
            for hq in 0..cfg.n_q_heads {
                let g = hq / group;
                let qh = &q[i * qw + hq * hd..i * qw + (hq + 1) * hd];
                for (j, s) in p.iter_mut().enumerate() {
                    *s = dot(qh, &keys[j * kvw + g * hd..j * kvw + (g + 1) * hd]) * scale;
                }
                softmax_in_place(&mut p);
                let oh = &mut out[hq * hd..(hq + 1) * hd];
                for (j, &w) in p.iter().enumerate() {
                    let vj = &values[j * kvw + g * hd..j * kvw + (g + 1) * hd];
                    for (o, vv) in oh.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
                if let Some(m) = mass.as_mut() {
                    for (acc, w) in m.iter_mut().zip(&p) {
                        *acc += w;
                    }
                }
            }
            (out, mass)
        });

        let mut attn_out = Vec::with_capacity(n * qw);
        let mut observer = vec![0.0f32; total];
        let mut final_row = vec![0.0f32; total];
        for (i, (out, mass)) in rows.into_iter().enumerate() {
            attn_out.extend_from_slice(&out);
            if let Some(m) = mass {
                if i >= observe_from {
                    for (acc, w) in observer.iter_mut().zip(&m) {
                        *acc += w;
                    }
                }
                if i == n - 1 {
                    final_row[..m.len()].copy_from_slice(&m);
                }
            }
        }
        let ops = (0..n).map(|i| (prior + i + 1) as u64).sum();

        let o = matmul_t(&attn_out, n, &lw.wo);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }

        let h2 = rms_norm(x, d, &lw.mlp_norm.data, eps);
        let gate = matmul_t(&h2, n, &lw.w_gate);
        let up = matmul_t(&h2, n, &lw.w_up);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = matmul_t(&act, n, &lw.w_down);
        for (xi, di) in x.iter_mut().zip(&down) {
            *xi += di;
        }

        for spec in opts
            .taps
            .iter()
            .filter(|s| s.layer == l && s.projection == Projection::Hidden)
        {
            tapped.taps.push(Tap {
                spec: *spec,
                dim: d,
                data: x.to_vec(),
            });
        }

        Ok((LayerAttention { observer, final_row }, ops))
    }

    /// Single-token step through every layer; returns the next-token logits.
    pub fn decode_token(&self, cache: &mut KVCacheSet, token: TokenId) -> Result<Vec<f32>> {
        if cache.layers.iter().any(|l| l.is_empty()) {
            return Err(Error::Precondition(
                "decode needs a non-empty cache at every layer".into(),
            ));
        }
        let out = self.forward_chunk(
            &[token],
            None,
            cache,
            &ForwardOptions {
                observer_window: 0,
                ..ForwardOptions::full(self.config.n_layers)
            },
        )?;
        Ok(out.logits.expect("all layers executed"))
    }

    /// Dense prefill: the whole sequence in one chunk with an unbounded cache.
    pub fn prefill_dense(&self, tokens: &[TokenId], all_logits: bool) -> Result<(ChunkOutput, KVCacheSet)> {
        let mut cache = KVCacheSet::unbounded(&self.config);
        let out = self.forward_chunk(
            tokens,
            None,
            &mut cache,
            &ForwardOptions {
                all_logits,
                ..ForwardOptions::full(self.config.n_layers)
            },
        )?;
        Ok((out, cache))
    }
}

/// Greedy choice over a logits row.
pub fn greedy(logits: &[f32]) -> TokenId {
    tensor::argmax(logits) as TokenId
}
