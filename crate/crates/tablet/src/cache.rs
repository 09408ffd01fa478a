//! On-disk token cache: one archive per scan holding the scheme, the shape,
//! an autoencoder fingerprint and the row-major f32 token payload.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use tablet_core::tokenizer::tokenize_sequence;
use tablet_core::{Autoencoder2D, Scheme, TokenSequence, Volume4D};

use crate::archive::{Archive, Tensor, TensorData};
use crate::{IoError, IoResult};

const MAGIC: &[u8; 8] = b"TBLTOK01";

pub fn write_tokens(path: &Path, seq: &TokenSequence, ae_fingerprint: &str) -> IoResult<()> {
    let mut a = Archive::default();
    a.meta.insert("scan_id".into(), seq.scan_id.clone());
    a.meta.insert("scheme".into(), seq.scheme.to_string());
    a.meta.insert("frame_origin".into(), seq.frame_origin.to_string());
    a.meta.insert("ae".into(), ae_fingerprint.to_string());
    a.tensors.push(Tensor { name: "tokens".into(), shape: vec![seq.t, seq.n, seq.d], data: TensorData::F32(seq.data.clone()) });
    a.write(path, MAGIC)
}

/// Reads a cached sequence and the fingerprint of the autoencoder that produced it.
pub fn read_tokens(path: &Path) -> IoResult<(TokenSequence, String)> {
    let a = Archive::read(path, MAGIC)?;
    let scheme: Scheme = a.meta_str(path, "scheme")?.parse()?;
    let t = a.tensor("tokens").ok_or_else(|| IoError::format(path, "no token tensor"))?;
    let (TensorData::F32(data), [tt, n, d]) = (&t.data, t.shape.as_slice()) else {
        return Err(IoError::format(path, "token tensor must be f32 with shape (t, n, d)"));
    };
    let seq = TokenSequence::new(a.meta_str(path, "scan_id")?, scheme, a.meta_parse(path, "frame_origin")?, [*tt, *n, *d], data.clone())?;
    Ok((seq, a.meta_str(path, "ae")?.to_string()))
}

/// Directory of cached sequences with hit and miss counters.
#[derive(Debug)]
pub struct TokenCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl TokenCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn path_for(&self, scan_id: &str, scheme: Scheme) -> PathBuf {
        let safe: String = scan_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
        self.dir.join(format!("{safe}.{scheme}.tok"))
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Counts a hit served through [`TokenCache::lookup`] without loading the volume.
    pub fn record_hit(&self) {
        self.hits.fetch_add(1, Ordering::Relaxed);
    }

    /// Cached tokens if present, valid and produced by the same autoencoder;
    /// `None` otherwise. Corrupt entries are logged and treated as absent.
    pub fn lookup(&self, scan_id: &str, scheme: Scheme, ae_fingerprint: &str) -> Option<TokenSequence> {
        let path = self.path_for(scan_id, scheme);
        if !path.exists() {
            return None;
        }
        match read_tokens(&path) {
            Ok((seq, fp)) if fp == ae_fingerprint && seq.scan_id == scan_id => Some(seq),
            Ok(_) => {
                log::info!("{}: cached tokens come from a different autoencoder; re-tokenizing", path.display());
                None
            }
            Err(e) => {
                log::warn!("{e}; re-tokenizing");
                None
            }
        }
    }

    /// Returns cached tokens, tokenizing and storing them on a miss.
    pub fn get_or_tokenize<A: Autoencoder2D + ?Sized>(&self, vol: &Volume4D, ae: &A, ae_fingerprint: &str, scheme: Scheme) -> IoResult<TokenSequence> {
        if let Some(seq) = self.lookup(&vol.scan_id, scheme, ae_fingerprint) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(seq);
        }
        self.store(vol, ae, ae_fingerprint, scheme)
    }

    /// Tokenizes `vol`, writes the cache entry and counts a miss.
    pub fn store<A: Autoencoder2D + ?Sized>(&self, vol: &Volume4D, ae: &A, ae_fingerprint: &str, scheme: Scheme) -> IoResult<TokenSequence> {
        self.misses.fetch_add(1, Ordering::Relaxed);
        let seq = tokenize_sequence(vol, ae, scheme)?;
        write_tokens(&self.path_for(&vol.scan_id, scheme), &seq, ae_fingerprint)?;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tablet_core::{Array, LosslessAe};

    fn volume(id: &str) -> Volume4D {
        let n = 2 * 32 * 32 * 32;
        let data = (0..n).map(|i| ((i * 7919) % 2001) as f32 / 1000.0 - 1.0).collect();
        Volume4D::new(Array::from_vec(&[2, 32, 32, 32], data).unwrap(), [1.0; 3], id).unwrap()
    }

    #[test]
    fn bit_exact_round_trip_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TokenCache::new(dir.path());
        let ae = LosslessAe::with_factor(32).unwrap();
        let vol = volume("scan/1");
        let a = cache.get_or_tokenize(&vol, &ae, "lossless", Scheme::Cell).unwrap();
        let b = cache.get_or_tokenize(&vol, &ae, "lossless", Scheme::Cell).unwrap();
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a, b);
        // different codec → miss
        cache.get_or_tokenize(&vol, &ae, "other", Scheme::Cell).unwrap();
        assert_eq!(cache.misses(), 2);
    }

    #[test]
    fn corrupted_entry_forces_retokenize() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TokenCache::new(dir.path());
        let ae = LosslessAe::with_factor(32).unwrap();
        let vol = volume("s");
        let a = cache.get_or_tokenize(&vol, &ae, "x", Scheme::Row).unwrap();
        let p = cache.path_for("s", Scheme::Row);
        let mut bytes = std::fs::read(&p).unwrap();
        let k = bytes.len() - 5;
        bytes[k] ^= 0x40;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tokens(&p), Err(IoError::Checksum { .. })));
        let b = cache.get_or_tokenize(&vol, &ae, "x", Scheme::Row).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.misses(), 2);
        assert!(read_tokens(&p).is_ok());
    }
}
