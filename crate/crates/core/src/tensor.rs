//! Dense row-major f32 tensors and the handful of kernels the forward pass needs.

use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with eight independent accumulators.
///
/// Summation order is fixed, so the result does not depend on threading.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn l2_norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// `x [n, in] · w[out, in]ᵀ → [n, out]`.
pub fn matmul_t(x: &[f32], n: usize, w: &Tensor) -> Vec<f32> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), n * in_dim);
    let mut out = vec![0.0f32; n * out_dim];
    if n == 1 {
        // Single row: spread output features across workers instead.
        const BLOCK: usize = 64;
        let blocks = par::map_range(out_dim.div_ceil(BLOCK), |b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(out_dim);
            (lo..hi).map(|o| dot(x, w.row(o))).collect::<Vec<_>>()
        });
        for (b, vals) in blocks.into_iter().enumerate() {
            out[b * BLOCK..b * BLOCK + vals.len()].copy_from_slice(&vals);
        }
    } else {
        par::for_each_row_mut(&mut out, out_dim, |i, row| {
            let xi = &x[i * in_dim..(i + 1) * in_dim];
            for (o, slot) in row.iter_mut().enumerate() {
                *slot = dot(xi, w.row(o));
            }
        });
    }
    out
}

/// Row-wise RMS normalisation scaled by `weight`.
pub fn rms_norm(x: &[f32], width: usize, weight: &[f32], eps: f32) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        let ms = dot(row, row) / width as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(weight) {
            *v *= inv * g;
        }
    }
    out
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest element; ties go to the smallest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..19).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..19).map(|i| 1.0 - i as f32 * 0.1).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-4);
    }

    #[test]
    fn matmul_single_row_and_batch_agree() {
        let w = Tensor::new(vec![70, 3], (0..210).map(|i| (i % 7) as f32 - 3.0).collect());
        let x = vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5];
        let batch = matmul_t(&x, 2, &w);
        let single = matmul_t(&x[..3], 1, &w);
        assert_eq!(&batch[..70], &single[..]);
        assert_eq!(&batch[70..], &single[..]);
    }

    #[test]
    fn softmax_sums_to_one_and_survives_large_logits() {
        let mut v = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(v[1] > v[0] && v[0] > v[2]);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
