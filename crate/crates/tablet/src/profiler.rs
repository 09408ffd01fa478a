//! Allocation counting and the training-step memory/time sweep.
//!
//! The global allocator keeps per-thread live and peak byte counts, so a
//! measurement only sees allocations made on the measuring thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tablet_core::optim::{AdamW, AdamWConfig};
use tablet_core::{BrainTransformer, ModelConfig};

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn track(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            track(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        track(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            track(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Bytes allocated and not yet freed by this thread.
pub fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Restarts peak tracking from the current live count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Highest live count since the last [`reset_peak`].
pub fn peak_bytes() -> isize {
    PEAK.with(Cell::get)
}

/// Runs `f` and returns its result with the peak bytes allocated above the starting live count.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    reset_peak();
    let base = live_bytes();
    let r = f();
    (r, (peak_bytes() - base).max(0) as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileStatus {
    Ok,
    /// Estimated requirement exceeded the budget, or the step panicked on allocation.
    OutOfMemory(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    pub model: String,
    pub t_frames: usize,
    pub batch_size: usize,
    pub peak_memory_bytes: Option<usize>,
    pub seconds_per_step: Option<f64>,
    pub status: ProfileStatus,
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub model: ModelConfig,
    pub tag: String,
    pub ts: Vec<usize>,
    pub batch_size: usize,
    /// Timed steps per configuration; the median is reported.
    pub steps: usize,
    pub memory_budget_bytes: Option<usize>,
    pub seed: u64,
}

/// Rough upper bound on one training step's peak allocation: activations and
/// tape for every example in the batch plus gradients and optimizer state.
pub fn estimate_step_bytes(cfg: &ModelConfig, t: usize, batch: usize) -> usize {
    let rows = t * cfg.tokens_per_frame + 1;
    let per_layer = rows * (8 * cfg.dim + 3 * cfg.hidden_dim() + cfg.heads);
    let tape = rows * (cfg.d_token + 4 * cfg.dim) + cfg.layers * per_layer;
    let params: usize = BrainTransformer::new(cfg.clone(), 0).map(|m| m.num_params()).unwrap_or(0);
    8 * (batch * tape + 4 * params)
}

/// One optimization step over `batch` random windows; returns the mean prediction.
fn train_step(model: &mut BrainTransformer, opt: &mut AdamW, batch: &[Vec<f64>]) -> tablet_core::Result<f64> {
    let mut grads = model.zero_grads();
    let mut acc = 0.0;
    for x in batch {
        let (y, tape) = model.forward_train(x)?;
        model.backward(&tape, 1.0 / batch.len() as f64, &mut grads)?;
        acc += y;
    }
    opt.step(model.params_mut(), &grads, 1e-4)?;
    Ok(acc / batch.len() as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Profiles a training step at each `T`. Over-budget or panicking
/// configurations are recorded as out of memory and the sweep continues.
pub fn profile(cfg: &ProfileConfig) -> tablet_core::Result<Vec<ProfileRecord>> {
    cfg.model.validate()?;
    let mut out = Vec::new();
    for &t in &cfg.ts {
        let mut rec = ProfileRecord {
            model: cfg.tag.clone(),
            t_frames: t,
            batch_size: cfg.batch_size,
            peak_memory_bytes: None,
            seconds_per_step: None,
            status: ProfileStatus::Ok,
        };
        let est = estimate_step_bytes(&cfg.model, t, cfg.batch_size);
        if let Some(budget) = cfg.memory_budget_bytes.filter(|&b| est > b) {
            log::warn!("T={t}: estimated {est} bytes exceeds the {budget}-byte budget; recorded as out of memory");
            rec.status = ProfileStatus::OutOfMemory(format!("estimated {est} bytes > budget {budget}"));
            out.push(rec);
            continue;
        }
        let run = catch_unwind(AssertUnwindSafe(|| -> tablet_core::Result<(usize, f64)> {
            let mut model = BrainTransformer::new(ModelConfig { t_frames: t, ..cfg.model.clone() }, cfg.seed)?;
            let mut opt = AdamW::new(model.params(), AdamWConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ t as u64);
            let len = t * cfg.model.tokens_per_frame * cfg.model.d_token;
            let batch: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            // warm-up step so optimizer state is allocated before measuring
            train_step(&mut model, &mut opt, &batch)?;
            let (r, peak) = measure_peak(|| train_step(&mut model, &mut opt, &batch));
            r?;
            let mut times = Vec::with_capacity(cfg.steps.max(1));
            for _ in 0..cfg.steps.max(1) {
                let start = Instant::now();
                train_step(&mut model, &mut opt, &batch)?;
                times.push(start.elapsed().as_secs_f64());
            }
            Ok((peak, median(times)))
        }));
        match run {
            Ok(Ok((peak, secs))) => {
                rec.peak_memory_bytes = Some(peak);
                rec.seconds_per_step = Some(secs);
            }
            Ok(Err(e)) => return Err(e),
            Err(_) => {
                log::warn!("T={t}: training step panicked; recorded as out of memory");
                rec.status = ProfileStatus::OutOfMemory("step panicked".into());
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_thread_allocations() {
        let (v, peak) = measure_peak(|| vec![0u8; 1 << 20]);
        assert!(peak >= 1 << 20, "{peak}");
        drop(v);
        let (_, peak) = measure_peak(|| ());
        assert_eq!(peak, 0);
    }

    #[test]
    fn memory_non_decreasing_and_budget_records_oom() {
        let cfg = ProfileConfig {
            model: ModelConfig::tiny(12, 3),
            tag: "tiny".into(),
            ts: vec![1, 2, 4],
            batch_size: 2,
            steps: 1,
            memory_budget_bytes: None,
            seed: 1,
        };
        let recs = profile(&cfg).unwrap();
        let mem: Vec<usize> = recs.iter().map(|r| r.peak_memory_bytes.unwrap()).collect();
        assert!(mem.windows(2).all(|w| w[0] <= w[1]), "{mem:?}");
        assert!(recs.iter().all(|r| r.seconds_per_step.unwrap().is_finite()));

        let tight = ProfileConfig { memory_budget_bytes: Some(estimate_step_bytes(&cfg.model, 2, 2)), ..cfg };
        let recs = profile(&tight).unwrap();
        assert_eq!(recs[0].status, ProfileStatus::Ok);
        assert_eq!(recs[1].status, ProfileStatus::Ok);
        assert!(matches!(recs[2].status, ProfileStatus::OutOfMemory(_)));
    }

    #[test]
    fn profiling_does_not_change_outputs() {
        let model = BrainTransformer::new(ModelConfig::tiny(12, 3), 9).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 12).map(|i| (i as f64 * 0.37).sin()).collect();
        let plain = model.forward(&x).unwrap();
        let (profiled, _) = measure_peak(|| model.forward(&x).unwrap());
        assert_eq!(plain.to_bits(), profiled.to_bits());
    }
}
