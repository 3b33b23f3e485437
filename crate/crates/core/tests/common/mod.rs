//! Test-only reference implementations, written independently of the engine's
//! kernels: plain loops, f64 accumulation, no cache.
#![allow(dead_code)]

use reform::{Model, ModelConfig, TokenId};

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        d_ff: 48,
        vocab_size: 264,
        rope_theta: 10000.0,
        rms_eps: 1e-5,
        max_positions: 1024,
    }
}

fn matvec(w: &reform::tensor::Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data[r * cols + c] as f64 * x[c]).sum())
        .collect()
}

fn rmsnorm(x: &[f64], g: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * *g as f64).collect()
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let hd = v.len();
    for i in 0..hd / 2 {
        let a = pos as f64 / theta.powf(2.0 * i as f64 / hd as f64);
        let (x, y) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = x * a.cos() - y * a.sin();
        v[2 * i + 1] = x * a.sin() + y * a.cos();
    }
}

/// Full causal forward with positions `0..n`; returns logits for every row.
pub fn dense_logits(model: &Model, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let w = &model.weights;
    let hd = cfg.head_dim;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.tok_embeddings.row(t as usize).iter().map(|&v| v as f64).collect())
        .collect();
    for lw in &w.layers {
        let h: Vec<Vec<f64>> = x.iter().map(|r| rmsnorm(r, &lw.attn_norm.data, cfg.rms_eps)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(&lw.wq, r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(&lw.wk, r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(&lw.wv, r)).collect();
        let mut attn = vec![vec![0.0f64; cfg.n_q_heads * hd]; n];
        for hq in 0..cfg.n_q_heads {
            let g = hq / (cfg.n_q_heads / cfg.n_kv_heads);
            for i in 0..n {
                let mut qi = q[i][hq * hd..(hq + 1) * hd].to_vec();
                rotate(&mut qi, i, cfg.rope_theta);
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let mut kj = k[j][g * hd..(g + 1) * hd].to_vec();
                        rotate(&mut kj, j, cfg.rope_theta);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in 0..hd {
                        attn[i][hq * hd + c] += e[j] / z * v[j][g * hd + c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&lw.wo, &attn[i]);
            for (a, b) in x[i].iter_mut().zip(o) {
                *a += b;
            }
            let h2 = rmsnorm(&x[i], &lw.mlp_norm.data, cfg.rms_eps);
            let gate = matvec(&lw.w_gate, &h2);
            let up = matvec(&lw.w_up, &h2);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = matvec(&lw.w_down, &act);
            for (a, b) in x[i].iter_mut().zip(down) {
                *a += b;
            }
        }
    }
    x.iter()
        .map(|r| matvec(&w.lm_head, &rmsnorm(r, &w.norm.data, cfg.rms_eps)))
        .collect()
}

/// max |a − b| / max |b|.
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs())) / scale
}

pub fn rel_err_f32(a: &[f32], b: &[f32]) -> f64 {
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    rel_err(a, &b64)
}

pub fn random_tokens(seed: u64, n: usize, vocab: usize) -> Vec<TokenId> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}
