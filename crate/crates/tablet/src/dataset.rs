//! Manifest-driven datasets: loading, preprocessing, splitting, target
//! normalization, codec selection and cached tokenization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tablet_core::data::{make_split, normalize_targets, preprocess_volume, SplitRecord, TargetNormalizer};
use tablet_core::tokenizer::extract_slice;
use tablet_core::train::{target_kind, Example};
use tablet_core::{Axis, LinearPatchAe, LosslessAe, SplitSpec, TargetRecord, TokenSequence, Volume4D};

use crate::cache::TokenCache;
use crate::codec::{external_checkpoint_adapter, load_codec, save_codec, Codec};
use crate::config::RunConfig;
use crate::{blob, nifti_io, IoError, IoResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scan_id: String,
    pub path: PathBuf,
    pub target: f64,
    #[serde(default)]
    pub stratum: String,
}

pub fn read_manifest(path: &Path) -> IoResult<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| IoError::format(path, e.to_string()))?;
    let rows = rdr.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(|e| IoError::format(path, e.to_string()))?;
    if rows.is_empty() {
        return Err(IoError::format(path, "manifest lists no scans"));
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> IoResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| IoError::format(path, e.to_string()))?;
    }
    crate::write_atomic(path, &w.into_inner().map_err(|e| IoError::format(path, e.to_string()))?)
}

/// Loads a scan file (`.f32` blob or NIfTI) and preprocesses it to `shape`.
pub fn load_scan(path: &Path, scan_id: &str, shape: [usize; 3]) -> IoResult<Volume4D> {
    let name = path.to_string_lossy();
    let (raw, spacing) = if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        nifti_io::load_nifti(path)?
    } else {
        let (v, _) = blob::read_blob(path)?;
        let spacing = v.spacing;
        (v.into_data(), spacing)
    };
    let (pre, report) = preprocess_volume(&raw, shape)?;
    if report.cropped.iter().any(|&c| c) {
        log::warn!("{scan_id}: brain bounding box exceeds {shape:?}; center-cropped");
    }
    Ok(Volume4D::new(pre, spacing, scan_id)?)
}

pub struct Dataset {
    pub rows: Vec<ManifestRow>,
    pub root: PathBuf,
    pub shape: [usize; 3],
}

impl Dataset {
    pub fn open(manifest: &Path, shape: [usize; 3]) -> IoResult<Self> {
        let rows = read_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { rows, root, shape })
    }

    pub fn load(&self, i: usize) -> IoResult<Volume4D> {
        let r = &self.rows[i];
        load_scan(&self.root.join(&r.path), &r.scan_id, self.shape)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.scan_id == id)
    }

    pub fn split(&self, ratios: [f64; 3], seed: u64) -> IoResult<SplitSpec> {
        let recs: Vec<SplitRecord> = self.rows.iter().map(|r| SplitRecord { id: r.scan_id.clone(), stratum: r.stratum.clone() }).collect();
        let split = make_split(&recs, ratios, seed)?;
        for (from, into) in &split.merged_strata {
            log::warn!("stratum {from:?} has fewer than 3 scans; merged into {into:?}");
        }
        Ok(split)
    }
}

/// Gray slices of one frame along all three axes.
pub fn frame_slices(frame: &[f32], dims: [usize; 3]) -> Vec<(Vec<f32>, usize, usize)> {
    let mut out = Vec::new();
    for axis in Axis::ALL {
        let (count, h, w) = match axis {
            Axis::Depth => (dims[0], dims[1], dims[2]),
            Axis::Height => (dims[1], dims[0], dims[2]),
            Axis::Width => (dims[2], dims[0], dims[1]),
        };
        for s in 0..count {
            let mut buf = Vec::with_capacity(h * w);
            extract_slice(frame, dims, axis, s, &mut buf);
            out.push((buf, h, w));
        }
    }
    out
}

/// Builds the configured autoencoder. A PCA codec is fit on the first frame
/// of up to `fit_scans` training scans and stored in the cache directory, so
/// later runs reuse it.
pub fn build_codec(cfg: &RunConfig, ds: &Dataset, split: &SplitSpec, cache_dir: &Path) -> IoResult<Codec> {
    let a = &cfg.autoencoder;
    match a.kind.as_str() {
        "lossless" => Ok(Codec::Lossless(LosslessAe::default())),
        "checkpoint" => Ok(Codec::Linear(external_checkpoint_adapter(a.checkpoint.as_deref().unwrap_or(Path::new("")))?)),
        _ => {
            let path = cache_dir.join(format!("codec-pca-c{}.ae", a.channels));
            if path.exists() {
                match load_codec(&path) {
                    Ok(ae) => {
                        log::info!("reusing fitted codec {}", path.display());
                        return Ok(Codec::Linear(ae));
                    }
                    Err(e) => log::warn!("{e}; refitting codec"),
                }
            }
            let mut slices = Vec::new();
            for id in split.train.iter().take(a.fit_scans.max(1)) {
                let vol = ds.load(ds.index_of(id).expect("split ids come from the manifest"))?;
                slices.extend(frame_slices(vol.frame(0), vol.dims()));
            }
            let refs: Vec<(&[f32], usize, usize)> = slices.iter().map(|(s, h, w)| (s.as_slice(), *h, *w)).collect();
            let ae = LinearPatchAe::fit_pca(&refs, a.channels, tablet_core::COMPRESSION_FACTOR, a.max_patches, a.seed)?;
            save_codec(&path, &ae)?;
            log::info!("fitted PCA codec with {} channels on {} slices", a.channels, refs.len());
            Ok(Codec::Linear(ae))
        }
    }
}

/// Everything a training or evaluation command needs.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub records: BTreeMap<String, TargetRecord>,
    pub normalizer: Option<TargetNormalizer>,
    pub codec: Codec,
    pub sequences: BTreeMap<String, TokenSequence>,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

impl Prepared {
    pub fn examples(&self, ids: &[String]) -> Vec<Example<'_>> {
        ids.iter().map(|id| Example { tokens: &self.sequences[id], target: self.records[id].normalized_value }).collect()
    }

    pub fn ids(&self, split: &str) -> Vec<String> {
        match split {
            "train" => self.split.train.clone(),
            "val" => self.split.val.clone(),
            "test" => self.split.test.clone(),
            _ => self.dataset.rows.iter().map(|r| r.scan_id.clone()).collect(),
        }
    }

    /// Token geometry `(tokens per frame, token dimension)`.
    pub fn geometry(&self) -> (usize, usize) {
        let s = self.sequences.values().next().expect("prepared datasets are non-empty");
        (s.n, s.d)
    }

    /// `n_neg / n_pos` over the training split.
    pub fn auto_pos_weight(&self) -> f64 {
        let pos = self.split.train.iter().filter(|id| self.records[*id].raw_value > 0.5).count();
        let neg = self.split.train.len() - pos;
        if pos == 0 {
            1.0
        } else {
            neg as f64 / pos as f64
        }
    }
}

pub fn cache_dir(cfg: &RunConfig) -> PathBuf {
    cfg.tokenizer.cache_dir.clone().unwrap_or_else(|| cfg.data.manifest.parent().map(Path::to_path_buf).unwrap_or_default().join("tokens"))
}

/// Opens the manifest, splits, normalizes targets, builds the codec and
/// tokenizes every scan through the cache.
pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let ds = Dataset::open(&cfg.data.manifest, cfg.data.shape)?;
    let split = ds.split(cfg.data.split_ratios, cfg.data.split_seed)?;
    let kind = target_kind(cfg.head()?);
    let mut recs: Vec<TargetRecord> = ds
        .rows
        .iter()
        .map(|r| TargetRecord { scan_id: r.scan_id.clone(), kind, raw_value: r.target, normalized_value: r.target })
        .collect();
    let normalizer = normalize_targets(&mut recs, &split.train)?;
    let cdir = cache_dir(cfg);
    let codec = build_codec(cfg, &ds, &split, &cdir)?;
    let fp = codec.fingerprint();
    let cache = TokenCache::new(&cdir);
    let scheme = cfg.scheme()?;
    let mut sequences = BTreeMap::new();
    for (i, r) in ds.rows.iter().enumerate() {
        let seq = match cache.lookup(&r.scan_id, scheme, &fp) {
            Some(s) => {
                cache.record_hit();
                s
            }
            None => cache.store(&ds.load(i)?, codec.as_dyn(), &fp, scheme)?,
        };
        sequences.insert(r.scan_id.clone(), seq);
    }
    log::info!("token cache: {} hits, {} misses ({})", cache.hits(), cache.misses(), cdir.display());
    Ok(Prepared {
        records: recs.into_iter().map(|r| (r.scan_id.clone(), r)).collect(),
        dataset: ds,
        split,
        normalizer,
        codec,
        sequences,
        cache_hits: cache.hits(),
        cache_misses: cache.misses(),
    })
}
