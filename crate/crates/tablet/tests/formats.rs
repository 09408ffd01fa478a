//! Round trips and corruption handling of the on-disk formats.

use std::path::Path;

use proptest::prelude::*;
use tablet::archive::{Archive, Tensor, TensorData};
use tablet::cache::{read_tokens, write_tokens};
use tablet::IoError;
use tablet_core::{Scheme, TokenSequence};

const MAGIC: &[u8; 8] = b"TESTARC1";

fn tensor() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(1usize..4, 1..4), any::<bool>(), "[a-z][a-z0-9._]{0,12}").prop_flat_map(|(shape, wide, name)| {
        let n: usize = shape.iter().product();
        let data = if wide {
            prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64).boxed()
        } else {
            prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32).boxed()
        };
        data.prop_map(move |data| Tensor { name: name.clone(), shape: shape.clone(), data })
    })
}

fn same_bits(a: &Archive, b: &Archive) -> bool {
    a.meta == b.meta
        && a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|(x, y)| {
            x.name == y.name
                && x.shape == y.shape
                && match (&x.data, &y.data) {
                    (TensorData::F32(p), TensorData::F32(q)) => p.iter().map(|v| v.to_bits()).eq(q.iter().map(|v| v.to_bits())),
                    (TensorData::F64(p), TensorData::F64(q)) => p.iter().map(|v| v.to_bits()).eq(q.iter().map(|v| v.to_bits())),
                    _ => false,
                }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn archive_round_trips_bit_exactly(
        meta in prop::collection::btree_map("[a-z_]{1,8}", "[ -~&&[^\n=]]{0,16}", 0..5),
        tensors in prop::collection::vec(tensor(), 0..4),
    ) {
        let a = Archive { meta, tensors };
        let bytes = a.to_bytes(MAGIC);
        let b = Archive::from_bytes(Path::new("mem"), MAGIC, &bytes).unwrap();
        prop_assert!(same_bits(&a, &b));
    }

    #[test]
    fn any_single_byte_flip_is_rejected(tensors in prop::collection::vec(tensor(), 1..3), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let a = Archive { meta: Default::default(), tensors };
        let mut bytes = a.to_bytes(MAGIC);
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(Archive::from_bytes(Path::new("mem"), MAGIC, &bytes).is_err());
    }
}

#[test]
fn token_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tok");
    let data: Vec<f32> = (0..3 * 9 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
    let seq = TokenSequence::new("a", Scheme::Row, 0, [3, 9, 4], data).unwrap();
    write_tokens(&path, &seq, "fp-1").unwrap();
    let (back, fp) = read_tokens(&path).unwrap();
    assert_eq!((back, fp.as_str()), (seq, "fp-1"));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(read_tokens(&path), Err(IoError::Checksum { .. } | IoError::Format { .. })));
}
