//! Supervised training, masked pretraining loop, window sampling and sliding-window evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TargetKind;
use crate::error::{config_err, shape_err, Error, Result};
use crate::masking::{mtm_forward_backward, MaskPattern, MtmHead};
use crate::math::{self, Square};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{BrainTransformer, Gradients, HeadKind};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training window.
    pub t_frames: usize,
    pub seed: u64,
    /// Positive-class weight of the logit cross-entropy.
    pub pos_weight: Option<f64>,
    pub grad_clip: Option<f64>,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1e-2, epochs: 20, batch_size: 4, t_frames: 256, seed: 0, pos_weight: None, grad_clip: Some(1.0), warmup_steps: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.t_frames == 0 || self.batch_size == 0 {
            return Err(config_err!("t_frames and batch_size must be positive"));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) {
            return Err(config_err!("pos_weight must be positive"));
        }
        Ok(())
    }
}

/// A tokenized scan and its (normalized) target.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a TokenSequence,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

/// Start and length of a uniformly random contiguous window. Sequences no
/// longer than `t` are returned whole.
pub fn window_start<R: Rng>(t_total: usize, t: usize, rng: &mut R) -> (usize, usize) {
    if t_total <= t {
        (0, t_total)
    } else {
        (rng.random_range(0..=t_total - t), t)
    }
}

/// Random contiguous window of `t` frames, fixed by `seed`.
pub fn sample_window(seq: &TokenSequence, t: usize, seed: u64) -> Result<TokenSequence> {
    let (s, len) = window_start(seq.t, t, &mut ChaCha8Rng::seed_from_u64(seed));
    seq.window(s, len)
}

/// Evaluation windows: consecutive partitions from frame 0 plus, when the
/// length is not a multiple of `t`, a tail window ending at the last frame.
pub fn sliding_windows(t_total: usize, t: usize) -> Vec<(usize, usize)> {
    if t_total <= t || t == 0 {
        return vec![(0, t_total)];
    }
    let mut out: Vec<(usize, usize)> = (0..t_total / t).map(|i| (i * t, t)).collect();
    if t_total % t != 0 {
        out.push((t_total - t, t));
    }
    out
}

/// Arithmetic mean of `f` over the sliding windows of `seq`; also returns the window count.
pub fn sliding_eval<F>(seq: &TokenSequence, t: usize, mut f: F) -> Result<(f64, usize)>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    let windows = sliding_windows(seq.t, t);
    let fl = seq.n * seq.d;
    let mut sum = 0.0;
    for &(s, len) in &windows {
        sum += f(&seq.data[s * fl..(s + len) * fl])?;
    }
    Ok((sum / windows.len() as f64, windows.len()))
}

/// Model prediction averaged over sliding windows.
pub fn predict_sequence(model: &BrainTransformer, seq: &TokenSequence, t: usize) -> Result<f64> {
    check_sequence(model, seq)?;
    Ok(sliding_eval(seq, t, |w| model.forward_f32(w))?.0)
}

/// Logit cross-entropy `pw·y·softplus(−z) + (1−y)·softplus(z)` and its derivative in `z`.
pub fn bce_with_logits(z: f64, y: f64, pos_weight: f64) -> (f64, f64) {
    let loss = pos_weight * y * math::softplus(-z) + (1.0 - y) * math::softplus(z);
    let s = math::sigmoid(z);
    (loss, -pos_weight * y * (1.0 - s) + (1.0 - y) * s)
}

/// Absolute error and its subgradient.
pub fn l1_loss(p: f64, y: f64) -> (f64, f64) {
    let d = p - y;
    (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
}

fn loss_and_grad(kind: HeadKind, pred: f64, target: f64, pos_weight: f64) -> (f64, f64) {
    match kind {
        HeadKind::Binary => bce_with_logits(pred, target, pos_weight),
        HeadKind::Regression => l1_loss(pred, target),
    }
}

pub fn target_kind(head: HeadKind) -> TargetKind {
    match head {
        HeadKind::Binary => TargetKind::BinaryClassification,
        HeadKind::Regression => TargetKind::Regression,
    }
}

fn check_sequence(model: &BrainTransformer, seq: &TokenSequence) -> Result<()> {
    let c = model.config();
    if seq.n != c.tokens_per_frame || seq.d != c.d_token {
        return Err(shape_err!(
            "scan {} has {}x{} tokens per frame, model expects {}x{}",
            seq.scan_id,
            seq.n,
            seq.d,
            c.tokens_per_frame,
            c.d_token
        ));
    }
    Ok(())
}

/// Sliding-window predictions and metrics over a set of examples.
pub fn evaluate(model: &BrainTransformer, set: &[Example], t: usize, split: &str, pos_weight: f64) -> Result<(Vec<f64>, MetricsReport)> {
    let kind = model.config().head;
    let mut preds = Vec::with_capacity(set.len());
    let mut loss = 0.0;
    for ex in set {
        let p = predict_sequence(model, ex.tokens, t)?;
        loss += loss_and_grad(kind, p, ex.target, pos_weight).0;
        preds.push(p);
    }
    let labels: Vec<f64> = set.iter().map(|e| e.target).collect();
    let mut report = compute_metrics(&preds, &labels, target_kind(kind), split)?;
    report.loss = Some(loss / set.len() as f64);
    Ok((preds, report))
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Trains `model` in place. The model after the final epoch is the result.
pub fn train<F>(model: &mut BrainTransformer, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &BrainTransformer),
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    for ex in train_set.iter().chain(val_set) {
        check_sequence(model, ex.tokens)?;
    }
    let kind = model.config().head;
    let pw = cfg.pos_weight.unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut grads = model.zero_grads();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                let (s, len) = window_start(ex.tokens.t, cfg.t_frames, &mut rng);
                let fl = ex.tokens.n * ex.tokens.d;
                let x = to_f64(&ex.tokens.data[s * fl..(s + len) * fl]);
                let (pred, tape) = model.forward_train(&x)?;
                let (l, g) = loss_and_grad(kind, pred, ex.target, pw);
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}, scan {}", ex.tokens.scan_id)));
                }
                batch_loss += l;
                model.backward(&tape, g / batch.len() as f64, &mut grads)?;
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            lr = cosine_lr(cfg.lr, step, total, cfg.warmup_steps);
            opt.step(model.params_mut(), &grads, lr)?;
            epoch_loss += batch_loss;
            step += 1;
        }
        let val = if val_set.len() >= 2 { Some(evaluate(model, val_set, cfg.t_frames, "val", pw)?.1) } else { None };
        let rec = EpochRecord { epoch, lr, train_loss: epoch_loss / train_set.len() as f64, val };
        on_epoch(&rec, model);
        history.push(rec);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub t_frames: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, steps: 200, batch_size: 4, t_frames: 256, mask_ratio: 0.5, seed: 0, grad_clip: Some(1.0), warmup_steps: 0 }
    }
}

/// Masked-token pretraining state: encoder, reconstruction head and their optimizers.
pub struct Pretrainer {
    pub model: BrainTransformer,
    pub head: MtmHead,
    cfg: PretrainConfig,
    opt_model: AdamW,
    opt_head: AdamW,
    g_model: Gradients,
    g_head: Gradients,
    rng: ChaCha8Rng,
    step: usize,
}

impl Pretrainer {
    pub fn new(model: BrainTransformer, head: MtmHead, cfg: PretrainConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0) || cfg.batch_size == 0 || cfg.t_frames == 0 || !(0.0..=1.0).contains(&cfg.mask_ratio) {
            return Err(config_err!("invalid pretraining configuration {cfg:?}"));
        }
        let oc = AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() };
        Ok(Self {
            opt_model: AdamW::new(model.params(), oc),
            opt_head: AdamW::new(head.params(), oc),
            g_model: model.zero_grads(),
            g_head: head.zero_grads(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            head,
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimization step on a random batch from `data`; returns the mean loss.
    pub fn step(&mut self, data: &[&TokenSequence]) -> Result<f64> {
        if data.is_empty() {
            return Err(config_err!("no pretraining data"));
        }
        self.g_model.zero();
        self.g_head.zero();
        let b = self.cfg.batch_size;
        let mut loss = 0.0;
        for _ in 0..b {
            let seq = data[self.rng.random_range(0..data.len())];
            check_sequence(&self.model, seq)?;
            let (s, len) = window_start(seq.t, self.cfg.t_frames, &mut self.rng);
            let pattern = MaskPattern::tube(seq.n, len, self.cfg.mask_ratio, self.rng.random())?;
            let fl = seq.n * seq.d;
            let x = to_f64(&seq.data[s * fl..(s + len) * fl]);
            loss += mtm_forward_backward(&self.model, &self.head, &x, &pattern, &mut self.g_model, &mut self.g_head)?;
        }
        self.g_model.scale(1.0 / b as f64);
        self.g_head.scale(1.0 / b as f64);
        if let Some(c) = self.cfg.grad_clip {
            let n = math::sqrt(self.g_model.norm().sq() + self.g_head.norm().sq());
            if n > c {
                self.g_model.scale(c / n);
                self.g_head.scale(c / n);
            }
        }
        let lr = cosine_lr(self.cfg.lr, self.step, self.cfg.steps, self.cfg.warmup_steps);
        self.opt_model.step(self.model.params_mut(), &self.g_model, lr)?;
        self.opt_head.step(self.head.params_mut(), &self.g_head, lr)?;
        self.step += 1;
        Ok(loss / b as f64)
    }

    /// Runs the configured number of steps, calling `on_step(step, loss)`.
    pub fn run<F: FnMut(usize, f64)>(&mut self, data: &[&TokenSequence], mut on_step: F) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let l = self.step(data)?;
            on_step(self.step - 1, l);
            losses.push(l);
        }
        Ok(losses)
    }
}
