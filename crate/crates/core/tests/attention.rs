use proptest::prelude::*;

use regattn_core::attention::{
    apply_values, attention_logits, softmax_in_place, softmax_rows, AttentionKind, AttentionTensor,
    Qkv, MASK_SENTINEL,
};

fn row() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(
        prop_oneof![4 => -50.0f64..50.0, 1 => Just(MASK_SENTINEL)],
        1..24,
    )
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(mut r in row()) {
        let masked: Vec<bool> = r.iter().map(|&v| v == MASK_SENTINEL).collect();
        let ok = softmax_in_place(&mut r);
        prop_assert_eq!(ok, masked.iter().any(|m| !m));
        if ok {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (v, m) in r.iter().zip(&masked) {
                prop_assert!(*v >= 0.0);
                if *m {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_ignores_shifts(r in proptest::collection::vec(-20.0f64..20.0, 1..16), c in -100.0f64..100.0) {
        let (mut a, mut b) = (r.clone(), r.iter().map(|v| v + c).collect::<Vec<_>>());
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn logits_are_scaled_dot_products(
        heads in 1usize..3, hw in 1usize..5, n in 1usize..5, d in 1usize..9, seed in any::<u64>()
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let q: Vec<f64> = (0..heads * hw * d).map(|_| next()).collect();
        let k: Vec<f64> = (0..heads * n * d).map(|_| next()).collect();
        let v: Vec<f64> = (0..heads * n * 2).map(|_| next()).collect();
        let qkv = Qkv { heads, hw, n_tokens: n, d, d_v: 2, q: q.clone(), k: k.clone(), v: v.clone() };
        let logits = attention_logits(&qkv).unwrap();
        for h in 0..heads {
            for p in 0..hw {
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += q[(h * hw + p) * d + c] * k[(h * n + j) * d + c];
                    }
                    prop_assert!((logits.row(h, p)[j] - dot / (d as f64).sqrt()).abs() <= 1e-12);
                }
            }
        }
        let probs = softmax_rows(&logits).unwrap();
        let out = apply_values(&probs, &v, 2).unwrap();
        prop_assert_eq!(out.len(), heads * hw * 2);
        for h in 0..heads {
            for p in 0..hw {
                for c in 0..2 {
                    let want: f64 = (0..n).map(|j| probs.row(h, p)[j] * v[(h * n + j) * 2 + c]).sum();
                    prop_assert!((out[(h * hw + p) * 2 + c] - want).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn all_masked_row_is_an_error() {
    let t =
        AttentionTensor::logits(1, 2, 2, 4, vec![0.0, 1.0, MASK_SENTINEL, MASK_SENTINEL]).unwrap();
    assert!(softmax_rows(&t).is_err());
}

#[test]
fn shape_is_checked() {
    assert!(AttentionTensor::logits(2, 2, 2, 4, vec![0.0; 7]).is_err());
    let probs =
        softmax_rows(&AttentionTensor::logits(1, 1, 2, 1, vec![0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(probs.kind, AttentionKind::Probabilities);
    assert!(softmax_rows(&probs).is_err());
}
