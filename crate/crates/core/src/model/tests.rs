use super::*;
use rand::{Rng, SeedableRng};

fn rand_tokens(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn randomize_head(m: &mut BrainTransformer, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

#[test]
fn embed_shape_and_cls_row() {
    let cfg = ModelConfig { dim: 128, heads: 4, kv_heads: 2, ..ModelConfig::tiny(12, 27) };
    let m = BrainTransformer::new(cfg, 0).unwrap();
    let x = rand_tokens(4 * 27 * 12, 1);
    assert_eq!(m.embed_input(&x).unwrap().len(), 109 * 128);

    let zeros = vec![0.0; 4 * 27 * 12];
    let seq = m.project_input(&zeros).unwrap();
    assert_eq!(&seq[..128], &m.param("cls").unwrap().data[..]);
    assert!(seq[128..].iter().all(|&v| v == 0.0));
}

#[test]
fn identical_tokens_embed_identically() {
    let m = BrainTransformer::new(ModelConfig::tiny(6, 3), 0).unwrap();
    let mut x = rand_tokens(18, 2);
    let row = x[..6].to_vec();
    x[12..18].copy_from_slice(&row);
    let e = m.embed_input(&x).unwrap();
    let d = 16;
    assert_eq!(e[d..2 * d], e[3 * d..4 * d]);
}

#[test]
fn zero_head_predicts_zero() {
    let m = BrainTransformer::new(ModelConfig::tiny(6, 3), 0).unwrap();
    assert_eq!(m.forward(&rand_tokens(36, 3)).unwrap(), 0.0);
}

#[test]
fn frame_permutation_only_matters_through_rope() {
    let (n, dt) = (3, 6);
    let x = rand_tokens(4 * n * dt, 4);
    let fl = n * dt;
    let mut perm = x.clone();
    perm[..fl].copy_from_slice(&x[2 * fl..3 * fl]);
    perm[2 * fl..3 * fl].copy_from_slice(&x[..fl]);
    for rope in [false, true] {
        let mut m = BrainTransformer::new(ModelConfig { rope, ..ModelConfig::tiny(dt, n) }, 5).unwrap();
        randomize_head(&mut m, 6);
        let (a, b) = (m.forward(&x).unwrap(), m.forward(&perm).unwrap());
        if rope {
            assert!((a - b).abs() > 1e-9);
        } else {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn nan_is_surfaced() {
    let mut m = BrainTransformer::new(ModelConfig::tiny(6, 3), 0).unwrap();
    m.params_mut()[INPUT_PROJ].data[0] = f64::NAN;
    assert!(matches!(m.forward(&rand_tokens(18, 0)), Err(Error::Numeric(_))));
}

#[test]
fn config_validation() {
    let bad = [
        ModelConfig { heads: 3, kv_heads: 2, dim: 18, ..ModelConfig::tiny(4, 2) },
        ModelConfig { heads: 4, kv_heads: 2, dim: 12, ..ModelConfig::tiny(4, 2) },
        ModelConfig { dim: 15, ..ModelConfig::tiny(4, 2) },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    ModelConfig::default().validate().unwrap();
    assert_eq!(ModelConfig::default().head_dim(), 32);
}

#[test]
fn encoder_load_skips_head() {
    let cfg = ModelConfig::tiny(6, 3);
    let mut src = BrainTransformer::new(cfg.clone(), 1).unwrap();
    randomize_head(&mut src, 2);
    let mut dst = BrainTransformer::new(cfg.clone(), 9).unwrap();
    let copied = dst.load_encoder_from(&src).unwrap();
    assert_eq!(copied.len(), dst.params().len() - 2);
    for (a, b) in dst.params().iter().zip(src.params()) {
        assert_eq!(a.shape, b.shape);
        if a.name.starts_with("head.") {
            assert!(a.data.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(a.data, b.data);
        }
    }
    let rebuilt = BrainTransformer::from_params(cfg, src.params().to_vec()).unwrap();
    assert_eq!(rebuilt, src);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut m = BrainTransformer::new(ModelConfig::tiny(6, 3), 7).unwrap();
    randomize_head(&mut m, 8);
    let x = rand_tokens(2 * 3 * 6, 9);
    let (_, tape) = m.forward_train(&x).unwrap();
    let mut g = m.zero_grads();
    let gx = m.backward(&tape, 1.0, &mut g).unwrap();
    for i in 0..x.len() {
        let (mut p, mut q) = (x.clone(), x.clone());
        p[i] += 1e-5;
        q[i] -= 1e-5;
        let num = (m.forward(&p).unwrap() - m.forward(&q).unwrap()) / 2e-5;
        assert!((num - gx[i]).abs() <= 1e-6 + 1e-4 * num.abs(), "{i}: {num} vs {}", gx[i]);
    }
}
