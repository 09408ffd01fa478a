//! Synthetic scans on disk: a raw little-endian f32 blob `(t, d, h, w)` plus a
//! `key=value` sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tablet_core::{Array, Volume4D};

use crate::{write_atomic, IoError, IoResult};

/// Parsed `key=value` lines; `#` starts a comment line. Values are kept verbatim.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .collect()
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("meta")
}

fn parse_list<T: std::str::FromStr>(path: &Path, key: &str, v: Option<&String>) -> IoResult<Vec<T>> {
    let v = v.ok_or_else(|| IoError::format(path, format!("missing key {key}")))?;
    v.split(',').map(|s| s.trim().parse().map_err(|_| IoError::format(path, format!("bad value for {key}: {v}")))).collect()
}

/// Writes the volume and its sidecar. `extra` keys are stored alongside the layout keys.
pub fn write_blob(path: &Path, vol: &Volume4D, extra: &BTreeMap<String, String>) -> IoResult<()> {
    let mut bytes = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let mut meta = extra.clone();
    let shape = vol.data().shape();
    meta.insert("scan_id".into(), vol.scan_id.clone());
    meta.insert("shape".into(), shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    meta.insert("spacing".into(), vol.spacing.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    meta.insert("dtype".into(), "f32le".into());
    write_atomic(&sidecar_path(path), format_kv(&meta).as_bytes())
}

/// Reads a blob and its sidecar; returns the volume and all sidecar keys.
pub fn read_blob(path: &Path) -> IoResult<(Volume4D, BTreeMap<String, String>)> {
    let side = sidecar_path(path);
    let meta = parse_kv(&std::fs::read_to_string(&side).map_err(|e| IoError::io(&side, e))?);
    if meta.get("dtype").map(String::as_str) != Some("f32le") {
        return Err(IoError::format(&side, "dtype must be f32le"));
    }
    let shape: Vec<usize> = parse_list(&side, "shape", meta.get("shape"))?;
    let spacing: Vec<f32> = parse_list(&side, "spacing", meta.get("spacing"))?;
    if shape.len() != 4 || spacing.len() != 3 {
        return Err(IoError::format(&side, "shape needs 4 entries and spacing 3"));
    }
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(IoError::format(path, format!("expected {} bytes for shape {shape:?}, found {}", n * 4, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let id = meta.get("scan_id").cloned().unwrap_or_default();
    let vol = Volume4D::new(Array::from_vec(&shape, data)?, [spacing[0], spacing[1], spacing[2]], id)?;
    Ok((vol, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.f32");
        let data: Vec<f32> = (0..2 * 4 * 4 * 4).map(|i| (i as f32 / 64.0) - 1.0).collect();
        let vol = Volume4D::new(Array::from_vec(&[2, 4, 4, 4], data).unwrap(), [2.0, 2.0, 2.5], "s").unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("label".into(), "1".into());
        write_blob(&p, &vol, &extra).unwrap();
        let (back, meta) = read_blob(&p).unwrap();
        assert_eq!(back, vol);
        assert_eq!(meta["label"], "1");
        std::fs::write(&p, [0u8; 7]).unwrap();
        assert!(read_blob(&p).is_err());
    }
}
