//! Model parameters and their canonical tensor names.
//!
//! Projection matrices are stored `[out_features, in_features]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_embeddings: Tensor,
    pub layers: Vec<LayerWeights>,
    pub norm: Tensor,
    pub lm_head: Tensor,
}

const LAYER_TENSORS: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm",
    "w_gate",
    "w_up",
    "w_down",
];

/// Every tensor name and shape the schema requires for `cfg`, in file order.
pub fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![("tok_embeddings".to_string(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.n_layers {
        let shapes = [
            vec![d],
            vec![cfg.q_dim(), d],
            vec![cfg.kv_dim(), d],
            vec![cfg.kv_dim(), d],
            vec![d, cfg.q_dim()],
            vec![d],
            vec![cfg.d_ff, d],
            vec![cfg.d_ff, d],
            vec![d, cfg.d_ff],
        ];
        for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![cfg.vocab_size, d]));
    out
}

impl ModelWeights {
    /// Deterministic random weights: projections uniform with standard
    /// deviation `1/sqrt(fan_in)`, norm gains set to one.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = BTreeMap::new();
        for (name, shape) in schema(cfg) {
            let t = if shape.len() == 1 {
                Tensor::new(shape.clone(), vec![1.0; shape[0]])
            } else {
                let fan_in = shape[1] as f32;
                // uniform(-a, a) has std a/sqrt(3)
                let a = 3f32.sqrt() / fan_in.sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                Tensor::new(shape, data)
            };
            named.insert(name, t);
        }
        Self::from_named(cfg, named)
    }

    /// Assemble from a name → tensor map, checking the full schema.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, shape) in schema(cfg) {
            match named.get(&name) {
                None => return Err(Error::Validation(format!("missing tensor {name}"))),
                Some(t) if t.shape != shape => {
                    return Err(Error::Validation(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape, shape
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Validation(format!("tensor {name} has non-finite values")))
                }
                _ => {}
            }
        }
        if named.len() != schema(cfg).len() {
            let extra: Vec<_> = named
                .keys()
                .filter(|k| !schema(cfg).iter().any(|(n, _)| n == *k))
                .cloned()
                .collect();
            return Err(Error::Validation(format!("unexpected tensors {extra:?}")));
        }
        let mut take = |n: &str| named.remove(n).expect("checked above");
        let tok_embeddings = take("tok_embeddings");
        let layers = (0..cfg.n_layers)
            .map(|l| LayerWeights {
                attn_norm: take(&format!("layers.{l}.attn_norm")),
                wq: take(&format!("layers.{l}.wq")),
                wk: take(&format!("layers.{l}.wk")),
                wv: take(&format!("layers.{l}.wv")),
                wo: take(&format!("layers.{l}.wo")),
                mlp_norm: take(&format!("layers.{l}.mlp_norm")),
                w_gate: take(&format!("layers.{l}.w_gate")),
                w_up: take(&format!("layers.{l}.w_up")),
                w_down: take(&format!("layers.{l}.w_down")),
            })
            .collect();
        Ok(Self {
            tok_embeddings,
            layers,
            norm: take("norm"),
            lm_head: take("lm_head"),
        })
    }

    /// Tensors in schema order with their canonical names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_embeddings".to_string(), &self.tok_embeddings)];
        for (l, lw) in self.layers.iter().enumerate() {
            let ts = [
                &lw.attn_norm,
                &lw.wq,
                &lw.wk,
                &lw.wv,
                &lw.wo,
                &lw.mlp_norm,
                &lw.w_gate,
                &lw.w_up,
                &lw.w_down,
            ];
            for (name, t) in LAYER_TENSORS.iter().zip(ts) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("norm".to_string(), &self.norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            d_ff: 24,
            vocab_size: 32,
            max_positions: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = ModelWeights::init_random(&cfg(), 7).unwrap();
        let b = ModelWeights::init_random(&cfg(), 7).unwrap();
        let bits = |w: &ModelWeights| -> Vec<u32> {
            w.named()
                .iter()
                .flat_map(|(_, t)| t.data.iter().map(|x| x.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = ModelWeights::init_random(&cfg(), 7).unwrap();
        let b = ModelWeights::init_random(&cfg(), 8).unwrap();
        assert!(a.named().iter().zip(b.named()).any(|((_, x), (_, y))| x.data != y.data));
    }

    #[test]
    fn gqa_key_projection_shape() {
        let w = ModelWeights::init_random(&cfg(), 7).unwrap();
        assert_eq!(w.layers[0].wk.shape, vec![2 * 4, 16]);
        assert_eq!(w.layers[0].wq.shape, vec![4 * 4, 16]);
    }

    #[test]
    fn init_scale_follows_fan_in() {
        let big = ModelConfig { d_model: 256, ..cfg() };
        let w = ModelWeights::init_random(&big, 1).unwrap();
        let d = &w.layers[0].wq.data;
        let mean = d.iter().sum::<f32>() / d.len() as f32;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / d.len() as f32;
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - 1.0 / 16.0).abs() < 0.005);
    }

    #[test]
    fn missing_or_misshapen_tensor_rejected() {
        let w = ModelWeights::init_random(&cfg(), 1).unwrap();
        let mut named = w.clone().into_named();
        named.remove("norm");
        assert!(matches!(
            ModelWeights::from_named(&cfg(), named),
            Err(Error::Validation(_))
        ));
        let mut named = w.into_named();
        named.insert("norm".into(), Tensor::zeros(vec![15]));
        assert!(ModelWeights::from_named(&cfg(), named).is_err());
    }
}
