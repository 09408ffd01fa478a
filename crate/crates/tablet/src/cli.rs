//! Command-line entry points and run-directory management.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tablet_core::analysis::{self, average_maps, confident_correct, model_integrated_gradients, SsimParams};
use tablet_core::data::{block_atlas, synthesize_scan, voxel_checksum, SynthSpec, SynthTarget};
use tablet_core::masking::MtmHead;
use tablet_core::train::{self, predict_sequence, sliding_eval, EpochRecord, PretrainConfig, Pretrainer, TrainConfig};
use tablet_core::{Array, BrainTransformer, HeadKind, MetricsReport, ModelConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{self, prepare, Dataset, ManifestRow, Prepared};
use crate::profiler::{profile, ProfileConfig, ProfileRecord, ProfileStatus};
use crate::{blob, nifti_io, plot, write_atomic};

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "TABLET_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "tablet", version, about = "Tokenize 4D fMRI into compact latent tokens and train a long-sequence Transformer on them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into an output directory that already holds a run.
    #[arg(long, global = true)]
    pub force: bool,
    /// Random seed; required by `train`, `finetune` and `pretrain`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scans and a manifest.
    Synth,
    /// Fit or load the autoencoder and fill the token cache.
    Tokenize,
    /// Masked-token pretraining on the training split.
    Pretrain,
    /// Supervised training from scratch.
    Train,
    /// Supervised training from a pretrained encoder.
    Finetune {
        /// Pretraining checkpoint (overrides `train.init`).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Sliding-window evaluation of a checkpoint.
    Eval {
        /// Checkpoint to evaluate (overrides `eval.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Window length in frames (overrides `eval.t_frames`).
        #[arg(long = "T", value_name = "FRAMES")]
        t_frames: Option<usize>,
        /// Split to evaluate (overrides `eval.split`).
        #[arg(long)]
        split: Option<String>,
    },
    /// Reconstruction PSNR, SSIM and connectivity drift of the autoencoder.
    ReconReport,
    /// Integrated-gradients maps of confidently classified scans.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Peak memory and time per training step across sequence lengths.
    Profile,
    /// Render a metrics or profile CSV as an SVG figure.
    Plot {
        /// `metrics.csv` of an earlier run.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Tokenize => "tokenize",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::ReconReport => "recon-report",
            Command::Attribute { .. } => "attribute",
            Command::Profile => "profile",
            Command::Plot { .. } => "plot",
        }
    }

    fn needs_seed(&self) -> bool {
        matches!(self, Command::Train | Command::Pretrain | Command::Finetune { .. })
    }
}

/// One long-format row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: String,
    pub epoch: Option<usize>,
    pub step: Option<usize>,
    pub split: String,
    pub scan: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(phase: &str, split: &str, metric: &str, value: f64) -> Self {
        Self { phase: phase.into(), epoch: None, step: None, split: split.into(), scan: String::new(), metric: metric.into(), value }
    }

    fn epoch(mut self, e: usize) -> Self {
        self.epoch = Some(e);
        self
    }

    fn step(mut self, s: usize) -> Self {
        self.step = Some(s);
        self
    }

    fn scan(mut self, id: &str) -> Self {
        self.scan = id.into();
        self
    }
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>().with_context(|| format!("parsing {}", path.display()))?)
}

/// An exclusive output directory: lock file, config snapshot and metrics rows.
pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
    _lock_file: File,
    metrics: csv::Writer<File>,
}

impl RunDir {
    pub fn open(root: &Path, force: bool, snapshot: &str) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).with_context(|| format!("creating {}", root.display()))?;
        std::fs::create_dir_all(root.join("plots"))?;
        let lock = root.join(".lock");
        let lock_file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("{} is locked by another run (remove {} if that run is gone)", root.display(), lock.display()))?;
        let guard = LockGuard(lock.clone());
        if root.join("config.snapshot").exists() && !force {
            bail!("{} already holds a run; pass --force to overwrite it", root.display());
        }
        write_atomic(&root.join("config.snapshot"), snapshot.as_bytes())?;
        let metrics = csv::Writer::from_path(root.join("metrics.csv"))?;
        std::mem::forget(guard);
        Ok(Self { root: root.to_path_buf(), lock, _lock_file: lock_file, metrics })
    }

    pub fn row(&mut self, row: MetricRow) -> anyhow::Result<()> {
        self.metrics.serialize(row)?;
        Ok(())
    }

    pub fn report(&mut self, phase: &str, epoch: Option<usize>, r: &MetricsReport) -> anyhow::Result<()> {
        for (name, v) in report_values(r) {
            let mut row = MetricRow::new(phase, &r.split, name, v);
            row.epoch = epoch;
            self.row(row)?;
        }
        self.metrics.flush()?;
        Ok(())
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.metrics.flush();
        let _ = std::fs::remove_file(&self.lock);
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Named scalar values of a report in a fixed order.
pub fn report_values(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    let mut v = vec![("n", r.n_samples as f64)];
    if let Some(l) = r.loss {
        v.push(("loss", l));
    }
    if let Some(c) = &r.classification {
        v.push(("acc", c.acc));
        if let Some(a) = c.auc {
            v.push(("auc", a));
        }
        v.push(("f1", c.f1));
    }
    if let Some(g) = &r.regression {
        v.push(("mse", g.mse));
        v.push(("mae", g.mae));
        if let Some(p) = g.pearson {
            v.push(("pearson", p));
        }
    }
    v
}

fn check_device() -> Result<(), ConfigError> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(d) => Err(ConfigError(format!("{DEVICE_ENV}={d:?}: only the cpu device is available"))),
    }
}

/// Parses arguments, runs the command and returns the process exit status:
/// 0 on success, 2 for invalid configuration or usage, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("configuration error: {c}");
                2
            } else {
                eprintln!("error: {e:#}");
                1
            }
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    check_device()?;
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("run.out={}", toml::Value::String(out.display().to_string())));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
    }
    match &cli.command {
        Command::Eval { checkpoint, t_frames, split } => {
            if let Some(c) = checkpoint {
                overrides.push(format!("eval.checkpoint={}", toml::Value::String(c.display().to_string())));
            }
            if let Some(t) = t_frames {
                overrides.push(format!("eval.t_frames={t}"));
            }
            if let Some(s) = split {
                overrides.push(format!("eval.split={}", toml::Value::String(s.clone())));
            }
        }
        Command::Attribute { checkpoint: Some(c) } => overrides.push(format!("eval.checkpoint={}", toml::Value::String(c.display().to_string()))),
        Command::Finetune { init: Some(p) } => overrides.push(format!("train.init={}", toml::Value::String(p.display().to_string()))),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cli.command.needs_seed() && cli.seed.is_none() {
        return Err(ConfigError(format!("`{}` requires --seed", cli.command.name())));
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let mut run = RunDir::open(&cfg.run.out, cli.force, &cfg.snapshot())?;
    log::info!("{}: writing to {}", cli.command.name(), run.root.display());
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &mut run),
        Command::Tokenize => cmd_tokenize(&cfg, &mut run),
        Command::Pretrain => cmd_pretrain(&cfg, &mut run),
        Command::Train => cmd_train(&cfg, &mut run, None),
        Command::Finetune { .. } => {
            let init = cfg.train.init.clone().ok_or_else(|| ConfigError("`finetune` requires --init or train.init".into()))?;
            cmd_train(&cfg, &mut run, Some(&init))
        }
        Command::Eval { .. } => cmd_eval(&cfg, &mut run),
        Command::ReconReport => cmd_recon(&cfg, &mut run),
        Command::Attribute { .. } => cmd_attribute(&cfg, &mut run),
        Command::Profile => cmd_profile(&cfg, &mut run),
        Command::Plot { input } => cmd_plot(input, &mut run),
    }
}

fn cmd_synth(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let s = &cfg.synth;
    let dir = run.root.join("scans");
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut rows = Vec::with_capacity(s.scans);
    for i in 0..s.scans {
        let id = format!("synth-{i:04}");
        let (target, stratum) = if s.task == "binary" {
            let y = i % 2 == 1;
            (SynthTarget::Binary(y), format!("y={}", y as u8))
        } else {
            (SynthTarget::Regression(rng.random_range(-1.0..1.0)), String::from("all"))
        };
        let spec = SynthSpec { dims: s.shape, t_total: s.frames, snr: s.snr, label_effect: s.label_effect, target, seed: s.seed.wrapping_mul(1_000_003).wrapping_add(i as u64) };
        let (vol, rec) = synthesize_scan(&spec, id.clone())?;
        let rel = PathBuf::from("scans").join(format!("{id}.f32"));
        let mut extra = BTreeMap::new();
        extra.insert("target".to_string(), format!("{:?}", rec.raw_value));
        blob::write_blob(&dir.join(format!("{id}.f32")), &vol, &extra)?;
        if s.nifti {
            nifti_io::write_nifti(&dir.join(format!("{id}.nii")), vol.data(), vol.spacing)?;
        }
        run.row(MetricRow::new("synth", "all", "checksum", voxel_checksum(vol.data().data())).scan(&id))?;
        rows.push(ManifestRow { scan_id: id, path: rel, target: rec.raw_value, stratum });
    }
    dataset::write_manifest(&run.root.join("manifest.csv"), &rows)?;
    log::info!("wrote {} scans and {}", rows.len(), run.root.join("manifest.csv").display());
    Ok(())
}

fn write_split(run: &RunDir, p: &Prepared) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scan_id", "split"])?;
    for (name, ids) in ["train", "val", "test"].iter().zip(p.split.parts()) {
        for id in ids {
            w.write_record([id.as_str(), name])?;
        }
    }
    write_atomic(&run.root.join("split.csv"), &w.into_inner()?)?;
    Ok(())
}

fn cmd_tokenize(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let p = prepare(cfg)?;
    write_split(run, &p)?;
    let (n, d) = p.geometry();
    for (k, v) in [("scans", p.sequences.len() as f64), ("tokens_per_frame", n as f64), ("token_dim", d as f64), ("cache_hits", p.cache_hits as f64), ("cache_misses", p.cache_misses as f64)] {
        run.row(MetricRow::new("tokenize", "all", k, v))?;
    }
    Ok(())
}

fn train_config(cfg: &RunConfig, p: &Prepared, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    let pos_weight = t.pos_weight.as_deref().map(|w| if w == "auto" { p.auto_pos_weight() } else { w.parse().expect("validated") });
    TrainConfig { lr: t.lr, weight_decay: t.weight_decay, epochs: t.epochs, batch_size: t.batch_size, t_frames: t.t_frames, seed, pos_weight, grad_clip: t.grad_clip, warmup_steps: t.warmup_steps }
}

fn cmd_train(cfg: &RunConfig, run: &mut RunDir, init: Option<&Path>) -> anyhow::Result<()> {
    let seed = cfg.run.seed.expect("seed checked during resolution");
    let p = prepare(cfg)?;
    write_split(run, &p)?;
    let (n, d) = p.geometry();
    let mut model = BrainTransformer::new(cfg.model_config(d, n)?, seed)?;
    if let Some(path) = init {
        let ck = load_checkpoint(path)?;
        let copied = model.load_encoder_from(&ck.model).with_context(|| format!("loading encoder from {}", path.display()))?;
        log::info!("initialized {} encoder tensors from {}", copied.len(), path.display());
    }
    let tc = train_config(cfg, &p, seed);
    let phase = if init.is_some() { "finetune" } else { "train" };
    let (train_set, val_set) = (p.examples(&p.split.train), p.examples(&p.split.val));
    let every = cfg.train.checkpoint_every;
    let mut rows: Vec<EpochRecord> = Vec::new();
    let mut failure = None;
    train::train(&mut model, &train_set, &val_set, &tc, |rec, m| {
        let val = rec.val.as_ref().and_then(|v| v.primary()).map(|v| format!(" val {v:.4}")).unwrap_or_default();
        log::info!("{phase} epoch {}: loss {:.5} lr {:.3e}{val}", rec.epoch + 1, rec.train_loss, rec.lr);
        if every > 0 && (rec.epoch + 1) % every == 0 {
            let path = run.checkpoint(&format!("epoch-{:03}.ckpt", rec.epoch + 1));
            if let Err(e) = save_checkpoint(&path, m, None, &[("epoch", (rec.epoch + 1).to_string())]) {
                failure.get_or_insert(e);
            }
        }
        rows.push(rec.clone());
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    for rec in &rows {
        run.row(MetricRow::new(phase, "train", "loss", rec.train_loss).epoch(rec.epoch + 1))?;
        run.row(MetricRow::new(phase, "train", "lr", rec.lr).epoch(rec.epoch + 1))?;
        if let Some(v) = &rec.val {
            run.report(phase, Some(rec.epoch + 1), v)?;
        }
    }
    save_checkpoint(&run.checkpoint("final.ckpt"), &model, None, &[("epochs", cfg.train.epochs.to_string()), ("seed", seed.to_string())])?;
    let test = p.examples(&p.split.test);
    if test.len() >= 2 {
        let (_, r) = train::evaluate(&model, &test, cfg.train.t_frames, "test", tc.pos_weight.unwrap_or(1.0))?;
        log::info!("{phase} test: {}", report_values(&r).iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" "));
        run.report(phase, None, &r)?;
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let seed = cfg.run.seed.expect("seed checked during resolution");
    let p = prepare(cfg)?;
    write_split(run, &p)?;
    let (n, d) = p.geometry();
    let mc = ModelConfig { t_frames: cfg.pretrain.t_frames, ..cfg.model_config(d, n)? };
    let model = BrainTransformer::new(mc.clone(), seed)?;
    let head = MtmHead::new(mc.dim, d, seed.wrapping_add(1));
    let pc = &cfg.pretrain;
    let pcfg = PretrainConfig {
        lr: pc.lr,
        weight_decay: pc.weight_decay,
        steps: pc.steps,
        batch_size: pc.batch_size,
        t_frames: pc.t_frames,
        mask_ratio: pc.mask_ratio,
        seed,
        grad_clip: pc.grad_clip,
        warmup_steps: pc.warmup_steps,
    };
    let mut pre = Pretrainer::new(model, head, pcfg)?;
    let data: Vec<_> = p.split.train.iter().map(|id| &p.sequences[id]).collect();
    let losses = pre.run(&data, |step, loss| {
        if step % 10 == 0 {
            log::info!("pretrain step {step}: masked L1 {loss:.5}");
        }
    })?;
    for (i, l) in losses.iter().enumerate() {
        run.row(MetricRow::new("pretrain", "train", "mtm_loss", *l).step(i))?;
    }
    save_checkpoint(&run.checkpoint("pretrain.ckpt"), &pre.model, Some(&pre.head), &[("steps", pc.steps.to_string()), ("seed", seed.to_string())])?;
    Ok(())
}

fn eval_checkpoint(cfg: &RunConfig) -> anyhow::Result<BrainTransformer> {
    let path = cfg.eval.checkpoint.as_ref().ok_or_else(|| ConfigError("a checkpoint is required (--checkpoint or eval.checkpoint)".into()))?;
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn cmd_eval(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let model = eval_checkpoint(cfg)?;
    let p = prepare(cfg)?;
    let t = cfg.eval.t_frames;
    let ids = p.ids(&cfg.eval.split);
    let mut preds = Vec::with_capacity(ids.len());
    let mut total = 0;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scan_id", "prediction", "target", "windows"])?;
    for id in &ids {
        let seq = &p.sequences[id];
        let (pred, count) = sliding_eval(seq, t, |x| model.forward_f32(x))?;
        log::info!("scan {id}: {} frames, {count} evaluation windows of T={t}", seq.t);
        total += count;
        let target = p.records[id].normalized_value;
        w.write_record([id.clone(), format!("{pred:?}"), format!("{target:?}"), count.to_string()])?;
        run.row(MetricRow::new("eval", &cfg.eval.split, "windows", count as f64).scan(id))?;
        preds.push((pred, target));
    }
    log::info!("evaluation windows: {total} over {} scans", ids.len());
    write_atomic(&run.root.join("predictions.csv"), &w.into_inner()?)?;
    if preds.len() >= 2 {
        let (pr, lb): (Vec<f64>, Vec<f64>) = preds.into_iter().unzip();
        let r = tablet_core::metrics::compute_metrics(&pr, &lb, train::target_kind(model.config().head), &cfg.eval.split)?;
        log::info!("eval {}: {}", cfg.eval.split, report_values(&r).iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" "));
        run.report("eval", None, &r)?;
    }
    Ok(())
}

fn analysis_ids(cfg: &RunConfig, ds: &Dataset, split: &tablet_core::SplitSpec) -> Vec<String> {
    let ids: Vec<String> = match cfg.eval.split.as_str() {
        "train" => split.train.clone(),
        "val" => split.val.clone(),
        "test" => split.test.clone(),
        _ => ds.rows.iter().map(|r| r.scan_id.clone()).collect(),
    };
    let k = if cfg.analysis.max_scans == 0 { ids.len() } else { cfg.analysis.max_scans };
    ids.into_iter().take(k).collect()
}

fn cmd_recon(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let ds = Dataset::open(&cfg.data.manifest, cfg.data.shape)?;
    let split = ds.split(cfg.data.split_ratios, cfg.data.split_seed)?;
    let codec = dataset::build_codec(cfg, &ds, &split, &dataset::cache_dir(cfg))?;
    let ae = codec.as_dyn();
    let atlas = block_atlas(cfg.data.shape, cfg.analysis.roi_splits);
    let params = SsimParams { window: cfg.analysis.ssim_window, sigma: cfg.analysis.ssim_sigma, ..SsimParams::default() };
    let ids = analysis_ids(cfg, &ds, &split);
    let mut sums = [0.0f64; 3];
    for id in &ids {
        let vol = ds.load(ds.index_of(id).expect("split ids come from the manifest"))?;
        let (recon, rep) = analysis::recon_report(&vol, &ae, &atlas, &params)?;
        let psnr = analysis::psnr_capped(rep.psnr);
        log::info!("{id}: PSNR {psnr:.2} dB, SSIM {:.4}, FC drift {:.4}", rep.ssim, rep.fc_frobenius);
        for (i, (k, v)) in [("psnr_db", psnr), ("ssim", rep.ssim), ("fc_frobenius", rep.fc_frobenius)].into_iter().enumerate() {
            run.row(MetricRow::new("recon", &cfg.eval.split, k, v).scan(id))?;
            sums[i] += v;
        }
        if cfg.analysis.write_volumes {
            nifti_io::write_nifti(&run.root.join("recon").join(format!("{id}.nii")), recon.data(), recon.spacing)?;
        }
    }
    if !ids.is_empty() {
        for (k, s) in ["psnr_db", "ssim", "fc_frobenius"].iter().zip(sums) {
            run.row(MetricRow::new("recon", &cfg.eval.split, k, s / ids.len() as f64).scan("mean"))?;
        }
    }
    Ok(())
}

fn cmd_attribute(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let model = eval_checkpoint(cfg)?;
    if model.config().head != HeadKind::Binary {
        return Err(ConfigError("attribution selects confidently classified scans and needs a binary model".into()).into());
    }
    let p = prepare(cfg)?;
    let scheme = cfg.scheme()?;
    let ae = p.codec.as_dyn();
    let mut maps = Vec::new();
    let limit = if cfg.analysis.max_scans == 0 { usize::MAX } else { cfg.analysis.max_scans };
    for id in p.ids(&cfg.eval.split) {
        if maps.len() >= limit {
            break;
        }
        let logit = predict_sequence(&model, &p.sequences[&id], cfg.eval.t_frames)?;
        let label = p.records[&id].raw_value;
        if !confident_correct(logit, label) {
            continue;
        }
        let vol = p.dataset.load(p.dataset.index_of(&id).expect("split ids come from the manifest"))?;
        let map = model_integrated_gradients(&model, &ae, vol.frame(0), vol.dims(), scheme, cfg.analysis.ig_steps)?;
        log::info!("{id}: logit {logit:.3}, completeness residual {:.3e} ({:.2}% relative)", map.completeness_residual(), 100.0 * map.relative_residual());
        run.row(MetricRow::new("attribute", &cfg.eval.split, "relative_residual", map.relative_residual()).scan(&id))?;
        run.row(MetricRow::new("attribute", &cfg.eval.split, "logit", logit).scan(&id))?;
        maps.push(map);
    }
    if maps.is_empty() {
        log::warn!("no scan in the {} split was classified correctly with confidence >= 0.75; no map written", cfg.eval.split);
        return Ok(());
    }
    let avg = average_maps(&maps)?;
    let dims = maps[0].dims;
    let arr = Array::from_vec(&[1, dims[0], dims[1], dims[2]], avg.iter().map(|&v| v as f32).collect())?;
    nifti_io::write_nifti(&run.root.join("attribution.nii"), &arr, [1.0; 3])?;
    run.row(MetricRow::new("attribute", &cfg.eval.split, "maps", maps.len() as f64))?;
    Ok(())
}

pub fn profile_rows(records: &[ProfileRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in records {
        let base = |m: &str, v: f64| {
            let mut row = MetricRow::new("profile", &r.model, m, v);
            row.step = Some(r.t_frames);
            row
        };
        rows.push(base("batch_size", r.batch_size as f64));
        match r.status {
            ProfileStatus::Ok => {
                rows.push(base("peak_memory_bytes", r.peak_memory_bytes.unwrap_or(0) as f64));
                rows.push(base("seconds_per_step", r.seconds_per_step.unwrap_or(f64::NAN)));
            }
            ProfileStatus::OutOfMemory(_) => rows.push(base("out_of_memory", 1.0)),
        }
    }
    rows
}

/// Rebuilds profile records from `metrics.csv` rows (`step` holds T, `split` the model tag).
pub fn records_from_rows(rows: &[MetricRow]) -> Vec<ProfileRecord> {
    let mut out: Vec<ProfileRecord> = Vec::new();
    for r in rows.iter().filter(|r| r.phase == "profile") {
        let t = r.step.unwrap_or(0);
        let idx = match out.iter().position(|p| p.model == r.split && p.t_frames == t) {
            Some(i) => i,
            None => {
                out.push(ProfileRecord { model: r.split.clone(), t_frames: t, batch_size: 0, peak_memory_bytes: None, seconds_per_step: None, status: ProfileStatus::Ok });
                out.len() - 1
            }
        };
        let rec = &mut out[idx];
        match r.metric.as_str() {
            "batch_size" => rec.batch_size = r.value as usize,
            "peak_memory_bytes" => rec.peak_memory_bytes = Some(r.value as usize),
            "seconds_per_step" => rec.seconds_per_step = Some(r.value),
            "out_of_memory" => rec.status = ProfileStatus::OutOfMemory("recorded".into()),
            _ => {}
        }
    }
    out
}

fn cmd_profile(cfg: &RunConfig, run: &mut RunDir) -> anyhow::Result<()> {
    let pc = &cfg.profile;
    let model = ModelConfig { t_frames: pc.ts.iter().copied().max().unwrap_or(1), ..cfg.model_config(pc.d_token, pc.tokens_per_frame)? };
    let tag = format!("L{}-d{}-h{}/{}", model.layers, model.dim, model.heads, model.kv_heads);
    let pcfg = ProfileConfig {
        model,
        tag,
        ts: pc.ts.clone(),
        batch_size: pc.batch_size,
        steps: pc.steps,
        memory_budget_bytes: pc.memory_budget_mb.map(|mb| (mb * 1024.0 * 1024.0) as usize),
        seed: cfg.run.seed.unwrap_or(0),
    };
    let records = profile(&pcfg)?;
    for r in &records {
        match (&r.status, r.peak_memory_bytes, r.seconds_per_step) {
            (ProfileStatus::Ok, Some(m), Some(s)) => log::info!("T={}: peak {:.1} MiB, {:.4} s/step", r.t_frames, m as f64 / 1048576.0, s),
            (st, _, _) => log::warn!("T={}: {st:?}", r.t_frames),
        }
    }
    for row in profile_rows(&records) {
        run.row(row)?;
    }
    write_atomic(&run.plot("profile.svg"), plot::profile_figure(&records).as_bytes())?;
    Ok(())
}

fn cmd_plot(input: &Path, run: &mut RunDir) -> anyhow::Result<()> {
    let rows = read_metrics(input)?;
    let profile = records_from_rows(&rows);
    if !profile.is_empty() {
        write_atomic(&run.plot("profile.svg"), plot::profile_figure(&profile).as_bytes())?;
        run.row(MetricRow::new("plot", "all", "profile_points", profile.len() as f64))?;
        return Ok(());
    }
    let mut by_metric: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in &rows {
        let x = match (r.epoch, r.step) {
            (Some(e), _) => e as f64,
            (None, Some(s)) => s as f64,
            _ => continue,
        };
        by_metric.entry(r.metric.clone()).or_default().entry(format!("{} {}", r.phase, r.split)).or_default().push((x, r.value));
    }
    if by_metric.is_empty() {
        bail!("{} has no per-epoch or per-step rows to plot", input.display());
    }
    let panels: Vec<plot::Panel> = by_metric
        .into_iter()
        .map(|(metric, series)| plot::Panel {
            title: metric.clone(),
            x_label: "epoch / step".into(),
            y_label: metric,
            log2_x: false,
            series: series.into_iter().map(|(name, points)| plot::Series { name, points }).collect(),
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "curves".to_string());
    meta.insert("source".to_string(), input.display().to_string());
    write_atomic(&run.plot("metrics.svg"), plot::render(&panels, &meta).as_bytes())?;
    run.row(MetricRow::new("plot", "all", "panels", panels.len() as f64))?;
    Ok(())
}
