//! Run configuration: a TOML file with fixed sections, `--set key=value`
//! overrides and a resolved snapshot written next to every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tablet_core::{HeadKind, ModelConfig, Scheme};

/// Configuration failures; the command line maps these to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub autoencoder: AutoencoderSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
    pub profile: ProfileSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Output directory.
    pub out: PathBuf,
    /// Seed for training and pretraining; `--seed` must supply it for those commands.
    pub seed: Option<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default"), seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV with columns `scan_id,path,target,stratum`; relative paths resolve against its directory.
    pub manifest: PathBuf,
    /// Spatial shape scans are cropped or padded to.
    pub shape: [usize; 3],
    /// `binary` or `regression`.
    pub task: String,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: PathBuf::from("data/manifest.csv"), shape: [96, 96, 96], task: "binary".into(), split_ratios: [0.7, 0.15, 0.15], split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub scans: usize,
    pub shape: [usize; 3],
    pub frames: usize,
    pub snr: f64,
    pub label_effect: f64,
    /// `binary` or `regression`.
    pub task: String,
    pub seed: u64,
    /// Also write scans as NIfTI next to the blobs.
    pub nifti: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { scans: 64, shape: [64, 64, 64], frames: 64, snr: 4.0, label_effect: 1.0, task: "binary".into(), seed: 0, nifti: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    /// `lossless`, `pca` (fit on training slices) or `checkpoint`.
    pub kind: String,
    /// Latent channels for `pca`.
    pub channels: usize,
    pub max_patches: usize,
    /// Training scans whose first frame feeds the PCA fit.
    pub fit_scans: usize,
    pub seed: u64,
    /// Codec file for `checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self { kind: "pca".into(), channels: 8, max_patches: 20_000, fit_scans: 8, seed: 0, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    /// `cell` (27x3072), `row` (9x9216) or `plane` (3x27648).
    pub scheme: String,
    /// Token cache directory; defaults to `<data dir>/tokens`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { scheme: "cell".into(), cache_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub rope: bool,
    pub rope_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: 2, heads: 4, kv_heads: 2, dim: 32, mlp_ratio: 2.0, rope: true, rope_base: 10_000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t_frames: usize,
    /// Positive-class weight; `auto` uses n_neg / n_pos of the training split.
    pub pos_weight: Option<String>,
    pub grad_clip: Option<f64>,
    pub warmup_steps: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Pretrained checkpoint for `finetune`.
    pub init: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, epochs: 20, batch_size: 4, t_frames: 32, pos_weight: None, grad_clip: Some(1.0), warmup_steps: 0, checkpoint_every: 0, init: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub t_frames: usize,
    pub mask_ratio: f64,
    pub grad_clip: Option<f64>,
    pub warmup_steps: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, steps: 200, batch_size: 4, t_frames: 32, mask_ratio: 0.5, grad_clip: Some(1.0), warmup_steps: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub t_frames: usize,
    /// `train`, `val`, `test` or `all`.
    pub split: String,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { t_frames: 32, split: "test".into(), checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub ig_steps: usize,
    /// Scans used by `recon-report` and `attribute` (0: all in the split).
    pub max_scans: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// ROI grid of the block parcellation used for connectivity.
    pub roi_splits: [usize; 3],
    pub write_volumes: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { ig_steps: 64, max_scans: 4, ssim_window: 7, ssim_sigma: 1.5, roi_splits: [2, 2, 2], write_volumes: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub ts: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub memory_budget_mb: Option<f64>,
    /// Token geometry of the profiled model.
    pub d_token: usize,
    pub tokens_per_frame: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { ts: vec![16, 64, 256], batch_size: 4, steps: 3, memory_budget_mb: None, d_token: 768, tokens_per_frame: 8 }
    }
}

impl RunConfig {
    /// Parses a TOML document and applies `key=value` overrides (`section.key=value`).
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        // Parsing the text directly keeps line and column information in the diagnostics.
        toml::from_str::<RunConfig>(text).map_err(|e| ConfigError(format!("{origin}: {e}")))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(format!("{origin}: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = RunConfig::deserialize(table).map_err(|e| ConfigError(format!("{origin} with overrides {overrides:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse("", "<defaults>", overrides),
        }
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn scheme(&self) -> Result<Scheme, ConfigError> {
        self.tokenizer.scheme.parse().map_err(|e: tablet_core::Error| ConfigError(format!("tokenizer.scheme: {e}")))
    }

    pub fn head(&self) -> Result<HeadKind, ConfigError> {
        self.data.task.parse().map_err(|e: tablet_core::Error| ConfigError(format!("data.task: {e}")))
    }

    pub fn model_config(&self, d_token: usize, tokens_per_frame: usize) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let c = ModelConfig {
            layers: m.layers,
            heads: m.heads,
            kv_heads: m.kv_heads,
            dim: m.dim,
            d_token,
            t_frames: self.train.t_frames,
            tokens_per_frame,
            head: self.head()?,
            mlp_ratio: m.mlp_ratio,
            rope: m.rope,
            rope_base: m.rope_base,
        };
        c.validate().map_err(|e| ConfigError(format!("model: {e}")))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        self.scheme()?;
        self.head()?;
        if !["lossless", "pca", "checkpoint"].contains(&self.autoencoder.kind.as_str()) {
            return err(format!("autoencoder.kind: expected lossless, pca or checkpoint, got {:?}", self.autoencoder.kind));
        }
        if self.autoencoder.kind == "checkpoint" && self.autoencoder.checkpoint.is_none() {
            return err("autoencoder.checkpoint is required when autoencoder.kind = \"checkpoint\"".into());
        }
        if !["binary", "regression"].contains(&self.synth.task.as_str()) {
            return err(format!("synth.task: expected binary or regression, got {:?}", self.synth.task));
        }
        if self.data.shape.iter().chain(&self.synth.shape).any(|&s| s == 0 || s % 32 != 0) {
            return err("data.shape and synth.shape entries must be positive multiples of 32".into());
        }
        if !(self.train.lr >= 0.0) || !(self.pretrain.lr >= 0.0) {
            return err("learning rates must be non-negative".into());
        }
        for (k, v) in [("train.t_frames", self.train.t_frames), ("train.batch_size", self.train.batch_size), ("pretrain.t_frames", self.pretrain.t_frames), ("pretrain.batch_size", self.pretrain.batch_size), ("eval.t_frames", self.eval.t_frames), ("profile.batch_size", self.profile.batch_size), ("synth.frames", self.synth.frames)] {
            if v == 0 {
                return err(format!("{k} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.mask_ratio) {
            return err(format!("pretrain.mask_ratio must lie in [0, 1], got {}", self.pretrain.mask_ratio));
        }
        if let Some(pw) = &self.train.pos_weight {
            if pw != "auto" && !pw.parse::<f64>().is_ok_and(|v| v > 0.0) {
                return err(format!("train.pos_weight: expected \"auto\" or a positive number, got {pw:?}"));
            }
        }
        if !["train", "val", "test", "all"].contains(&self.eval.split.as_str()) {
            return err(format!("eval.split: expected train, val, test or all, got {:?}", self.eval.split));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError(format!("override {spec:?}: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let value: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let (last, sections) = parts.split_last().filter(|(l, _)| !l.is_empty()).ok_or_else(|| ConfigError(format!("override {spec:?}: empty key")))?;
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override {spec:?}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::parse(&c.snapshot(), "snap", &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[train]\nlr = 0.01\nlearning_rate = 3\n";
        let e = RunConfig::parse(text, "cfg.toml", &[]).unwrap_err().0;
        assert!(e.contains("line 3"), "{e}");
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::parse("[model]\ndim = \"wide\"\n", "cfg.toml", &[]).unwrap_err().0;
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::parse("[train]\nepochs = 3\n", "x", &["train.epochs=5".into(), "tokenizer.scheme=9x9216".into(), "run.out=/tmp/o".into()]).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.scheme().unwrap(), Scheme::Row);
        assert_eq!(c.run.out, PathBuf::from("/tmp/o"));
        assert!(RunConfig::parse("", "x", &["tokenizer.scheme=5x5".into()]).is_err());
        assert!(RunConfig::parse("", "x", &["nosuch.key=1".into()]).is_err());
        assert!(RunConfig::parse("", "x", &["novalue".into()]).is_err());
        assert!(RunConfig::parse("", "x", &["pretrain.mask_ratio=1.5".into()]).is_err());
    }
}
