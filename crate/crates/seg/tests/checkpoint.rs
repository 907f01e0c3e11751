use std::path::Path;

use revhrnet::checkpoint::MAGIC;
use revhrnet::dataio::generate_synthetic;
use revhrnet::trainer::{train, TrainConfig};
use revhrnet::{load_checkpoint, save_checkpoint, ArchitectureSpec, Checkpoint, SegError, SegModel};

type Snapshot = Vec<(String, bool, Vec<u32>)>;

fn snapshot(model: &SegModel<f32>) -> Snapshot {
    model
        .params()
        .map(|p| (p.name.clone(), p.frozen, p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn saved(model: &SegModel<f32>, dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    save_checkpoint(model, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for spec in [ArchitectureSpec::desk(3), ArchitectureSpec::desk_variant(5)] {
        let a = SegModel::<f32>::build(&spec, 1).unwrap();
        let first = saved(&a, dir.path(), "a.ckpt");
        let mut b = SegModel::<f32>::build(&spec, 2).unwrap();
        assert_ne!(snapshot(&a), snapshot(&b));
        load_checkpoint(&mut b, &dir.path().join("a.ckpt")).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));
        assert_eq!(first, saved(&b, dir.path(), "b.ckpt"));
        assert!(!dir.path().join("b.ckpt.partial").exists());
    }
}

#[test]
fn corrupted_magic_leaves_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ArchitectureSpec::desk(3);
    let mut bytes = saved(&SegModel::<f32>::build(&spec, 1).unwrap(), dir.path(), "x.ckpt");
    assert_eq!(&bytes[..4], MAGIC);
    bytes[0] ^= 0xff;
    std::fs::write(dir.path().join("x.ckpt"), &bytes).unwrap();
    let mut model = SegModel::<f32>::build(&spec, 2).unwrap();
    let before = snapshot(&model);
    let err = load_checkpoint(&mut model, &dir.path().join("x.ckpt")).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
    assert_eq!(before, snapshot(&model));
}

#[test]
fn fingerprint_mismatch_leaves_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    saved(&SegModel::<f32>::build(&ArchitectureSpec::desk(3), 1).unwrap(), dir.path(), "x.ckpt");
    for spec in [ArchitectureSpec::desk(4), ArchitectureSpec::desk_variant(3)] {
        let mut model = SegModel::<f32>::build(&spec, 2).unwrap();
        let before = snapshot(&model);
        let err = load_checkpoint(&mut model, &dir.path().join("x.ckpt")).unwrap_err();
        assert!(matches!(err, SegError::FingerprintMismatch { .. }), "{err}");
        assert_eq!(before, snapshot(&model));
    }
}

#[test]
fn truncation_is_rejected_at_every_length() {
    let spec = ArchitectureSpec::desk(2);
    let model = SegModel::<f32>::build(&spec, 1).unwrap();
    let bytes = Checkpoint::from_params(spec.fingerprint(), model.params()).to_bytes();
    let step = (bytes.len() / 97).max(1);
    for len in (0..bytes.len()).step_by(step) {
        assert!(Checkpoint::from_bytes(&bytes[..len]).is_err(), "accepted {len} bytes");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn table_mismatches_name_every_offender() {
    let spec = ArchitectureSpec::desk(3);
    let mut model = SegModel::<f32>::build(&spec, 1).unwrap();
    let mut ckpt = Checkpoint::from_params(spec.fingerprint(), model.params());
    let renamed = ckpt.entries.iter().position(|e| e.name == "decoder.head.bias").unwrap();
    ckpt.entries[renamed].name = "decoder.head.offset".into();
    let transposed = ckpt.entries.iter().position(|e| e.name == "decoder.adapter1.weight").unwrap();
    ckpt.entries[transposed].shape.swap(0, 1);
    let before = snapshot(&model);
    let err = ckpt.apply_to(model.params_mut().collect()).unwrap_err().to_string();
    assert!(err.contains("missing decoder.head.bias"), "{err}");
    assert!(err.contains("unexpected decoder.head.offset"), "{err}");
    assert!(err.contains("decoder.adapter1.weight: checkpoint shape [32, 96, 1, 1] vs model shape [96, 32, 1, 1]"), "{err}");
    assert_eq!(before, snapshot(&model));
}

#[test]
fn backbone_reload_keeps_frozen_flags() {
    let spec = ArchitectureSpec::desk(3);
    let source = SegModel::<f32>::build(&spec, 4).unwrap();
    let entries = Checkpoint::from_params(spec.fingerprint(), source.backbone().params().iter());
    let mut model = SegModel::<f32>::build(&spec, 5).unwrap();
    model.backbone_mut().load_pretrained(&entries).unwrap();
    let got: Vec<_> = model.backbone().params().iter().map(|p| (p.value.data().to_vec(), p.frozen)).collect();
    let want: Vec<_> = source.backbone().params().iter().map(|p| (p.value.data().to_vec(), p.frozen)).collect();
    assert_eq!(got, want);
}

#[test]
fn flipped_frozen_flag_is_respected_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(7, 4, 32, 3, &dir.path().join("data")).unwrap();
    let spec = ArchitectureSpec::desk(3);
    let model = SegModel::<f32>::build(&spec, 0).unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ckpt = Checkpoint::from_params(spec.fingerprint(), model.params());
    let head = ckpt.entries.iter_mut().find(|e| e.name == "decoder.head.weight").unwrap();
    assert!(!head.frozen);
    head.frozen = true;
    ckpt.write(&path).unwrap();

    let mut model = SegModel::<f32>::build(&spec, 9).unwrap();
    load_checkpoint(&mut model, &path).unwrap();
    assert!(model.param("decoder.head.weight").unwrap().frozen);
    let before = model.clone();
    let config = TrainConfig {
        steps: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &manifest, &config, &mut std::io::sink()).unwrap();
    let head = |m: &SegModel<f32>| m.param("decoder.head.weight").unwrap().value.data().to_vec();
    assert_eq!(head(&before), head(&model));
    let bias = |m: &SegModel<f32>| m.param("decoder.head.bias").unwrap().value.data().to_vec();
    assert_ne!(bias(&before), bias(&model));
}
