//! Masked-token pretraining on a small synthetic cohort.

use tablet_core::data::{synthesize_scan, SynthSpec, SynthTarget};
use tablet_core::masking::MtmHead;
use tablet_core::tokenizer::{extract_slice, tokenize_sequence};
use tablet_core::train::{PretrainConfig, Pretrainer};
use tablet_core::{Axis, BrainTransformer, HeadKind, LinearPatchAe, ModelConfig, Scheme};

#[test]
fn two_hundred_steps_reduce_the_masked_loss() {
    let dims = [64, 64, 64];
    let vols: Vec<_> = (0..8)
        .map(|i| {
            let spec = SynthSpec { dims, t_total: 8, snr: 4.0, label_effect: 1.0, target: SynthTarget::Binary(i % 2 == 1), seed: 40 + i as u64 };
            synthesize_scan(&spec, format!("s{i}")).unwrap().0
        })
        .collect();
    let mut slices = Vec::new();
    for v in &vols[..2] {
        for s in 0..64 {
            let mut out = Vec::new();
            extract_slice(v.frame(0), dims, Axis::Depth, s, &mut out);
            slices.push(out);
        }
    }
    let refs: Vec<(&[f32], usize, usize)> = slices.iter().map(|s| (s.as_slice(), 64, 64)).collect();
    let ae = LinearPatchAe::fit_pca(&refs, 4, 32, 2000, 0).unwrap();
    let seqs: Vec<_> = vols.iter().map(|v| tokenize_sequence(v, &ae, Scheme::Cell).unwrap()).collect();
    let d_token = seqs[0].d;

    let cfg = ModelConfig { layers: 2, heads: 4, kv_heads: 2, dim: 16, d_token, t_frames: 4, tokens_per_frame: 8, head: HeadKind::Binary, mlp_ratio: 2.0, ..ModelConfig::default() };
    let model = BrainTransformer::new(cfg, 1).unwrap();
    let head = MtmHead::new(16, d_token, 2);
    let pcfg = PretrainConfig { lr: 1e-3, weight_decay: 1e-2, steps: 200, batch_size: 4, t_frames: 4, mask_ratio: 0.5, seed: 3, grad_clip: Some(1.0), warmup_steps: 0 };
    let mut pre = Pretrainer::new(model, head, pcfg).unwrap();
    let refs: Vec<_> = seqs.iter().collect();
    let losses = pre.run(&refs, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 200);
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.8 * losses[0], "step 0 loss {} vs last-10 mean {tail}", losses[0]);
}
