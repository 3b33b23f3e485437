use proptest::prelude::*;
use reform::retrieval::{gather, score, select, smooth_max, smooth_mean};
use reform::TokenId;

fn naive_max(v: &[f32], w: usize) -> Vec<f32> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(v.len() - 1);
            let mut m = v[lo];
            for &x in &v[lo..=hi] {
                if x > m {
                    m = x;
                }
            }
            m
        })
        .collect()
}

fn naive_mean(v: &[f32], w: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(v.len() - 1);
            v[lo..=hi].iter().map(|&x| x as f64).sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn scores() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-1.0f32..1.0, 1..120)
}

proptest! {
    #[test]
    fn smooth_max_matches_naive(v in scores(), w in 0usize..20) {
        prop_assert_eq!(smooth_max(&v, w), naive_max(&v, w));
    }

    #[test]
    fn smooth_max_dominates_input(v in scores(), w in 0usize..20) {
        for (p, s) in smooth_max(&v, w).iter().zip(&v) {
            prop_assert!(p >= s);
        }
    }

    #[test]
    fn smooth_mean_matches_naive(v in scores(), w in 0usize..30) {
        for (a, b) in smooth_mean(&v, w).iter().zip(naive_mean(&v, w)) {
            prop_assert!((*a as f64 - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn selection_invariants(
        v in proptest::collection::vec(-1.0f32..1.0, 20..100),
        q in 1usize..5,
        sink in 0usize..4,
        recent in 0usize..4,
        extra in 0usize..40,
    ) {
        let input_len = v.len() + q;
        let budget = sink + recent.max(q) + q + extra;
        let s = select(&v, budget, sink, recent, input_len).unwrap();
        prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(s.len(), budget.min(input_len));
        for p in (0..sink).chain(input_len - recent..input_len).chain(v.len()..input_len) {
            prop_assert!(s.contains(p));
        }
        let bigger = select(&v, budget + 1 + extra, sink, recent, input_len).unwrap();
        prop_assert!(s.indices.iter().all(|&p| bigger.contains(p)));
    }

    #[test]
    fn selection_is_scale_invariant(
        v in proptest::collection::vec(-1.0f32..1.0, 20..100),
        c in 0.01f32..100.0,
        budget in 8usize..40,
    ) {
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(
            select(&v, budget, 2, 2, v.len() + 1).unwrap(),
            select(&scaled, budget, 2, 2, v.len() + 1).unwrap()
        );
    }

    #[test]
    fn masked_query_rows_change_nothing(
        q in proptest::collection::vec(-1.0f32..1.0, 12),
        ctx in proptest::collection::vec(-1.0f32..1.0, 40),
        extra in proptest::collection::vec(-1.0f32..1.0, 4),
    ) {
        let base = score(&q, &ctx, 4, &[true; 3]).unwrap();
        let mut q2 = q.clone();
        q2.extend(&extra);
        let with = score(&q2, &ctx, 4, &[true, true, true, false]).unwrap();
        prop_assert_eq!(base, with);
    }

    #[test]
    fn gathered_tokens_are_a_subsequence(
        tokens in proptest::collection::vec(0u32..256, 10..60),
        budget in 5usize..20,
    ) {
        let scores: Vec<f32> = tokens[..tokens.len() - 1].iter().map(|&t| t as f32).collect();
        let sel = select(&scores, budget, 1, 1, tokens.len()).unwrap();
        let g: Vec<TokenId> = gather(&tokens, &sel).unwrap();
        let mut it = tokens.iter();
        prop_assert!(g.iter().all(|t| it.any(|x| x == t)));
    }
}

#[test]
fn two_by_three_matrix_case() {
    let q = [1.0, 0.0, 1.0, 1.0];
    let ctx = [2.0, 0.0, 0.0, 3.0, -1.0, 1.0];
    let s = score(&q, &ctx, 2, &[true, true]).unwrap();
    let cos = |a: &[f32], b: &[f32]| {
        let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
    };
    for i in 0..3 {
        let c = &ctx[2 * i..2 * i + 2];
        let want = cos(&q[..2], c).max(cos(&q[2..], c));
        assert!((s.scores[i] - want).abs() < 1e-6);
    }
}
