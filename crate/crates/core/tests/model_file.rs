use std::path::PathBuf;

use transpose_core::stego::{embed, StegoMethod};
use transpose_core::storage::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
use transpose_core::*;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny.tpsm")
}

/// Weights fixed by formula so the bytes do not depend on the initializer.
fn tiny() -> Model {
    let specs = vec![
        LayerSpec::conv(1, 2, 2, 1, 0, Activation::Relu),
        LayerSpec::reshape(vec![2, 2, 2], vec![8]),
        LayerSpec::linear(8, 3, Activation::Identity),
    ];
    let mut m = Model::build(&zoo::with_mirrored_activations(specs), &[1, 3, 3], 0).unwrap();
    let ids: Vec<ParamId> = m.params().ids().collect();
    let mut k = 0f32;
    for id in ids {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = (k * 0.375 - 2.0) / 7.0;
            k += 1.0;
        }
    }
    m
}

#[test]
fn byte_layout_matches_golden_file() {
    let bytes = encode_model(&tiny()).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).expect("golden file; regenerate with UPDATE_GOLDEN=1");
    assert_eq!(&golden[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(golden[4..8].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(bytes, golden);
    let m = decode_model(&golden).unwrap();
    assert_eq!(m.params().flatten(), tiny().params().flatten());
    // first conv weight, little-endian
    let first = (-2.0f32 / 7.0).to_le_bytes();
    assert!(golden.windows(4).any(|w| w == first));
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tpsm");
    let b = dir.path().join("b.tpsm");
    let model = Model::build(&zoo::vit(&[1, 8, 8], 4, 8, 2, 1, 3), &[1, 8, 8], 2).unwrap();
    save_model(&model, &a).unwrap();
    save_model(&load_model(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn embedded_bytes_survive_the_file() {
    let model = tiny();
    let payload: Vec<u8> = (0..40u8).map(|b| b.wrapping_mul(97)).collect();
    for method in [StegoMethod::Lsb, StegoMethod::LastBytes] {
        let (carrier, _) = embed(&model, &payload, method, 8).unwrap();
        let back = decode_model(&encode_model(&carrier).unwrap()).unwrap();
        let bits = |m: &Model| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&carrier));
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_model("/nonexistent/model.tpsm").unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}
