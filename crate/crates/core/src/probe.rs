//! A hand-wired two-layer model with known circuits, used as a functional
//! oracle for retrieval.
//!
//! Residual layout (`d_model` = 385): token code `[0,128)`, previous-token
//! code `[128,256)`, copied-output code `[256,384)`, constant `384`. Token
//! codes are rows of a 128×128 Sylvester Hadamard matrix, so distinct ASCII
//! tokens are exactly orthogonal; bytes ≥ 128 and specials get the zero code.
//!
//! * Layer 0, head 0: attends to the previous position purely through rotary
//!   phase (keys are the queries pre-rotated by one step) and copies its token
//!   code into the previous-token region. Its value states are the token codes,
//!   which makes `0:v:0` a token-identity embedding.
//! * Layer 1, head 0: induction. Queries carry the current token code, keys
//!   the previous-token code, values the token code; the output region then
//!   holds the token that followed the last earlier occurrence of the current
//!   token, and the LM head reads it back.
//! * Head 1 in both layers only sees the constant dimension and writes
//!   nothing: an uninformative head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::embeddings::{HeadSpec, Projection};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::weights::{LayerWeights, ModelWeights};

const CODE: usize = 128;
const TOK: usize = 0;
const PREV: usize = CODE;
const OUT: usize = 2 * CODE;
const CONST: usize = 3 * CODE;
const D_MODEL: usize = 3 * CODE + 1;
const HEAD_DIM: usize = 160;
/// Content lives in the slowest rotary pairs, where rotation is negligible.
const CONTENT: usize = 32;
const POSITIONAL_PAIRS: usize = 8;
/// Per-pair amplitude of positional queries and keys after normalisation.
const POS_AMPLITUDE: f32 = 26.0;
const INDUCTION_GAIN: f32 = 4.0;

pub const PROBE_ROPE_THETA: f64 = 1e30;

/// The token-identity value head.
pub const PROBE_HEAD: HeadSpec = HeadSpec {
    layer: 0,
    projection: Projection::Value,
    head: 0,
};

/// A value head that carries no token information.
pub const PROBE_BAD_HEAD: HeadSpec = HeadSpec {
    layer: 0,
    projection: Projection::Value,
    head: 1,
};

pub fn probe_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: D_MODEL,
        n_q_heads: 2,
        n_kv_heads: 2,
        head_dim: HEAD_DIM,
        d_ff: 8,
        vocab_size: crate::tokenizer::BYTE_VOCAB_SIZE,
        rope_theta: PROBE_ROPE_THETA,
        rms_eps: 1e-5,
        max_positions: 1 << 16,
    }
}

fn hadamard(i: usize, j: usize) -> f32 {
    if (i & j).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// The ±1 code of an ASCII token, or `None` for tokens with the zero code.
pub fn token_code(token: usize) -> Option<Vec<f32>> {
    (token < CODE).then(|| (0..CODE).map(|j| hadamard(token, j)).collect())
}

struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    fn new(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// `self[r0 + i, c0 + i] = gain` for `i < n`.
    fn diag(&mut self, r0: usize, c0: usize, n: usize, gain: f32) {
        for i in 0..n {
            self.set(r0 + i, c0 + i, gain);
        }
    }

    fn tensor(self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data)
    }
}

/// Head 1 projections: a fixed random mix of the constant dimension only.
fn junk_head(m: &mut Mat, rng: &mut ChaCha8Rng) {
    for r in HEAD_DIM..2 * HEAD_DIM {
        m.set(r, CONST, rng.gen_range(-0.1..0.1));
    }
}

/// Normalised value of the constant dimension for an ASCII token at layer 0.
fn const_scale() -> f32 {
    let c = (CODE as f32).sqrt();
    c / ((CODE as f32 + c * c) / D_MODEL as f32).sqrt()
}

pub fn probe_model() -> Model {
    let cfg = probe_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0b);
    let qkv = cfg.n_q_heads * HEAD_DIM;
    let c = (CODE as f32).sqrt();

    let mut emb = Mat::new(cfg.vocab_size, D_MODEL);
    for t in 0..cfg.vocab_size {
        if let Some(code) = token_code(t) {
            for (j, v) in code.into_iter().enumerate() {
                emb.set(t, TOK + j, v);
            }
        }
        emb.set(t, CONST, c);
    }

    let rope = crate::rope::Rope::new(HEAD_DIM, PROBE_ROPE_THETA).expect("even head dim");
    let freqs = rope.frequencies();
    let amp = POS_AMPLITUDE / const_scale();

    // layer 0: previous-token head
    let mut wq = Mat::new(qkv, D_MODEL);
    let mut wk = Mat::new(qkv, D_MODEL);
    let mut wv = Mat::new(qkv, D_MODEL);
    let mut wo = Mat::new(D_MODEL, qkv);
    for (p, &w) in freqs.iter().take(POSITIONAL_PAIRS).enumerate() {
        wq.set(2 * p, CONST, amp);
        wk.set(2 * p, CONST, amp * w.cos() as f32);
        wk.set(2 * p + 1, CONST, amp * w.sin() as f32);
    }
    wv.diag(CONTENT, TOK, CODE, 1.0);
    wo.diag(PREV, CONTENT, CODE, c / const_scale());
    for m in [&mut wq, &mut wk, &mut wv] {
        junk_head(m, &mut rng);
    }
    let layer0 = (wq, wk, wv, wo);

    // layer 1: induction head
    let mut wq = Mat::new(qkv, D_MODEL);
    let mut wk = Mat::new(qkv, D_MODEL);
    let mut wv = Mat::new(qkv, D_MODEL);
    let mut wo = Mat::new(D_MODEL, qkv);
    wq.diag(CONTENT, TOK, CODE, INDUCTION_GAIN);
    wk.diag(CONTENT, PREV, CODE, 1.0);
    wv.diag(CONTENT, TOK, CODE, 1.0);
    wo.diag(OUT, CONTENT, CODE, 1.0);
    for m in [&mut wq, &mut wk, &mut wv] {
        junk_head(m, &mut rng);
    }
    let layer1 = (wq, wk, wv, wo);

    let layers = [layer0, layer1]
        .into_iter()
        .map(|(wq, wk, wv, wo)| LayerWeights {
            attn_norm: Tensor::new(vec![D_MODEL], vec![1.0; D_MODEL]),
            wq: wq.tensor(),
            wk: wk.tensor(),
            wv: wv.tensor(),
            wo: wo.tensor(),
            mlp_norm: Tensor::new(vec![D_MODEL], vec![1.0; D_MODEL]),
            w_gate: Tensor::zeros(vec![cfg.d_ff, D_MODEL]),
            w_up: Tensor::zeros(vec![cfg.d_ff, D_MODEL]),
            w_down: Tensor::zeros(vec![D_MODEL, cfg.d_ff]),
        })
        .collect();

    let mut lm_head = Mat::new(cfg.vocab_size, D_MODEL);
    for t in 0..CODE {
        for (j, v) in token_code(t).unwrap().into_iter().enumerate() {
            lm_head.set(t, OUT + j, v);
        }
    }

    let weights = ModelWeights {
        tok_embeddings: emb.tensor(),
        layers,
        norm: Tensor::new(vec![D_MODEL], vec![1.0; D_MODEL]),
        lm_head: lm_head.tensor(),
    };
    Model::new(cfg, weights).expect("probe weights match the probe config")
}
