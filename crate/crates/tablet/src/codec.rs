//! Autoencoder backends selectable from the command line and the codec file
//! format used by the checkpoint adapter.

use std::path::Path;

use tablet_core::{Autoencoder2D, LinearPatchAe, LosslessAe, COMPRESSION_FACTOR};

use crate::archive::{Archive, Tensor, TensorData};
use crate::{IoError, IoResult};

const MAGIC: &[u8; 8] = b"TBLAE001";

/// Latent channel count the external checkpoint must report.
pub const EXTERNAL_CHANNELS: usize = 32;

pub fn save_codec(path: &Path, ae: &LinearPatchAe) -> IoResult<()> {
    let c = ae.latent_channels();
    let p = 3 * ae.factor() * ae.factor();
    let mut a = Archive::default();
    a.meta.insert("kind".into(), "linear-patch".into());
    a.meta.insert("channels".into(), c.to_string());
    a.meta.insert("factor".into(), ae.factor().to_string());
    let t = |name: &str, shape: Vec<usize>, v: &[f32]| Tensor { name: name.into(), shape, data: TensorData::F32(v.to_vec()) };
    a.tensors = vec![
        t("encoder", vec![c, p], ae.encoder()),
        t("encoder_bias", vec![c], ae.encoder_bias()),
        t("decoder", vec![p, c], ae.decoder()),
        t("decoder_bias", vec![p], ae.decoder_bias()),
    ];
    a.write(path, MAGIC)
}

pub fn load_codec(path: &Path) -> IoResult<LinearPatchAe> {
    let a = Archive::read(path, MAGIC)?;
    if a.meta_str(path, "kind")? != "linear-patch" {
        return Err(IoError::format(path, "unsupported codec kind"));
    }
    let get = |name: &str| -> IoResult<Vec<f32>> {
        match a.tensor(name).map(|t| &t.data) {
            Some(TensorData::F32(v)) => Ok(v.clone()),
            _ => Err(IoError::format(path, format!("missing f32 tensor {name}"))),
        }
    };
    Ok(LinearPatchAe::from_parts(
        a.meta_parse(path, "channels")?,
        a.meta_parse(path, "factor")?,
        get("encoder")?,
        get("encoder_bias")?,
        get("decoder")?,
        get("decoder_bias")?,
    )?)
}

/// Loads an externally trained codec for evaluation, requiring 32 latent
/// channels at factor 32.
pub fn external_checkpoint_adapter(path: &Path) -> IoResult<LinearPatchAe> {
    if !path.exists() {
        return Err(IoError::format(path, "autoencoder checkpoint not found; set `autoencoder.checkpoint` to a codec file written by `tablet synth --codec-out` or another f32c32 export"));
    }
    let ae = load_codec(path).map_err(|e| IoError::format(path, format!("cannot load autoencoder checkpoint ({e}); expected a TBLAE001 codec file")))?;
    if ae.latent_channels() != EXTERNAL_CHANNELS || ae.factor() != COMPRESSION_FACTOR {
        return Err(IoError::format(
            path,
            format!(
                "incompatible autoencoder checkpoint: reports C'={} f={}, expected C'={EXTERNAL_CHANNELS} f={COMPRESSION_FACTOR}; use `autoencoder.kind = \"pca\"` for other channel counts",
                ae.latent_channels(),
                ae.factor()
            ),
        ));
    }
    Ok(ae)
}

/// Stable identifier of a codec's weights, stored in the token cache.
pub fn fingerprint_linear(ae: &LinearPatchAe) -> String {
    let mut h = crc32fast::Hasher::new();
    for part in [ae.encoder(), ae.encoder_bias(), ae.decoder(), ae.decoder_bias()] {
        part.iter().for_each(|v| h.update(&v.to_le_bytes()));
    }
    format!("linear-c{}-f{}-{:08x}", ae.latent_channels(), ae.factor(), h.finalize())
}

/// A loaded backend.
#[derive(Debug, Clone)]
pub enum Codec {
    Lossless(LosslessAe),
    Linear(LinearPatchAe),
}

impl Codec {
    pub fn as_dyn(&self) -> &dyn Autoencoder2D {
        match self {
            Codec::Lossless(a) => a,
            Codec::Linear(a) => a,
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Codec::Lossless(a) => format!("lossless-f{}", a.factor()),
            Codec::Linear(a) => fingerprint_linear(a),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tablet_core::Array;

    #[test]
    fn codec_round_trip_and_adapter_checks() {
        let dir = tempfile::tempdir().unwrap();
        let good = LinearPatchAe::random(32, 32, 3).unwrap();
        let p = dir.path().join("c32.ae");
        save_codec(&p, &good).unwrap();
        let back = external_checkpoint_adapter(&p).unwrap();
        assert_eq!(back, good);
        assert_eq!(fingerprint_linear(&back), fingerprint_linear(&good));

        let img = Array::from_vec(&[3, 96, 96], (0..3 * 96 * 96).map(|i| ((i % 37) as f32 / 18.0) - 1.0).collect()).unwrap();
        let z1 = back.encode(&img).unwrap();
        assert_eq!(z1.shape(), &[32, 3, 3]);
        assert_eq!(z1, back.encode(&img).unwrap());

        let small = LinearPatchAe::random(8, 32, 3).unwrap();
        let q = dir.path().join("c8.ae");
        save_codec(&q, &small).unwrap();
        let err = external_checkpoint_adapter(&q).unwrap_err().to_string();
        assert!(err.contains("C'=8"), "{err}");
        assert!(external_checkpoint_adapter(&dir.path().join("missing.ae")).unwrap_err().to_string().contains("not found"));
    }
}
