//! Attention and rotary embedding checked against direct loop references.

use proptest::prelude::*;
use tablet_core::model::attention::{attention_probs, gqa_attention, rope_rotate};

fn reference(q: &[f64], k: &[f64], v: &[f64], len: usize, heads: usize, kv: usize, hd: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * heads * hd];
    for h in 0..heads {
        let g = h / (heads / kv);
        for i in 0..len {
            let s: Vec<f64> = (0..len).map(|j| (0..hd).map(|c| q[(i * heads + h) * hd + c] * k[(j * kv + g) * hd + c]).sum::<f64>() / (hd as f64).sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for (j, sj) in s.iter().enumerate() {
                for c in 0..hd {
                    out[(i * heads + h) * hd + c] += (sj - m).exp() / z * v[(j * kv + g) * hd + c];
                }
            }
        }
    }
    out
}

fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gqa_matches_loop_reference(len in 1usize..12, groups in prop::sample::select(vec![1usize, 2, 4]), seed in vecs(3 * 12 * 4 * 4)) {
        let (heads, hd) = (4, 4);
        let kv = heads / groups;
        let q = &seed[..len * heads * hd];
        let k = &seed[len * heads * hd..len * heads * hd + len * kv * hd];
        let v = &seed[2 * 12 * 4 * 4..2 * 12 * 4 * 4 + len * kv * hd];
        let got = gqa_attention(q, k, v, len, heads, kv, hd).unwrap();
        let want = reference(q, k, v, len, heads, kv, hd);
        for (a, b) in got.context.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
        let probs = attention_probs(q, k, len, heads, kv, hd).unwrap();
        for row in probs.chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rope_preserves_norm_and_depends_on_offset_only(q in vecs(8), k in vecs(8), m in 0u32..1000, n in 0u32..1000, s in 0u32..1000) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let rq = rope_rotate(&q, m as f64, 10_000.0).unwrap();
        prop_assert!((dot(&rq, &rq) - dot(&q, &q)).abs() <= 1e-9);
        let a = dot(&rq, &rope_rotate(&k, n as f64, 10_000.0).unwrap());
        let b = dot(&rope_rotate(&q, (m + s) as f64, 10_000.0).unwrap(), &rope_rotate(&k, (n + s) as f64, 10_000.0).unwrap());
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}
