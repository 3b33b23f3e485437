//! Rotary position encoding.
//!
//! Convention: interleaved pairs `(2i, 2i+1)` are rotated counter-clockwise by
//! `pos · theta^(-2i/head_dim)`, i.e. `(x, y) → (x cos a − y sin a, x sin a + y cos a)`.
//! Angles are evaluated in f64 so large position IDs keep full precision.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, theta: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head_dim, got {head_dim}"
            )));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| theta.powf(-(2.0 * i as f64) / head_dim as f64))
            .collect();
        Ok(Self { head_dim, inv_freq })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Per-pair angular frequencies.
    pub fn frequencies(&self) -> &[f64] {
        &self.inv_freq
    }

    /// Rotate every `head_dim` segment of each row in place. `rows` is
    /// `[positions.len(), k · head_dim]`.
    pub fn rotate_rows(&self, rows: &mut [f32], positions: &[usize]) {
        if positions.is_empty() {
            return;
        }
        let width = rows.len() / positions.len();
        debug_assert_eq!(width % self.head_dim, 0);
        let mut cs = vec![(0.0f32, 0.0f32); self.inv_freq.len()];
        for (row, &pos) in rows.chunks_mut(width).zip(positions) {
            for (slot, f) in cs.iter_mut().zip(&self.inv_freq) {
                let a = pos as f64 * f;
                *slot = (a.cos() as f32, a.sin() as f32);
            }
            for head in row.chunks_mut(self.head_dim) {
                for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&cs) {
                    let (x, y) = (pair[0], pair[1]);
                    pair[0] = x * c - y * s;
                    pair[1] = x * s + y * c;
                }
            }
        }
    }
}

/// Apply rotary encoding to `[n, head_dim]` states, returning a new buffer.
pub fn apply_rope(states: &[f32], positions: &[usize], head_dim: usize, theta: f64) -> Result<Vec<f32>> {
    let rope = Rope::new(head_dim, theta)?;
    if states.len() != positions.len() * head_dim {
        return Err(Error::Input(format!(
            "expected {} values for {} positions, got {}",
            positions.len() * head_dim,
            positions.len(),
            states.len()
        )));
    }
    let mut out = states.to_vec();
    rope.rotate_rows(&mut out, positions);
    Ok(out)
}
