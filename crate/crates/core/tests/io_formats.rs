use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use sdd_tta::io::{
    decode_checkpoint, decode_pgm, encode_checkpoint, encode_pgm, load_checkpoint, load_checkpoint_for, read_manifest,
    save_checkpoint, write_dataset, CheckpointMeta, CHECKPOINT_MAGIC,
};
use sdd_tta::net::{build_architecture, Architecture, ModelParams};
use sdd_tta::synth::{generate_dataset, DefectClass, DomainSpec, Texture};
use sdd_tta::tensor::Tensor;
use sdd_tta::Error;

fn random_params(seed: u64) -> ModelParams {
    let mut p = build_architecture(16, 24, seed).unwrap();
    let mut k = seed;
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // arbitrary bit patterns, including subnormals and negative zero
            *v = f32::from_bits((k >> 32) as u32 & 0xbf7f_ffff);
        }
    }
    p
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100u64 {
        let p = random_params(seed);
        let meta = CheckpointMeta {
            seed,
            provenance: BTreeMap::from([("run".to_string(), format!("r{seed}"))]),
        };
        let a = dir.path().join("a.sddckpt");
        let b = dir.path().join("b.sddckpt");
        save_checkpoint(&a, &p, &meta).unwrap();
        let (loaded, m2) = load_checkpoint(&a).unwrap();
        assert!(loaded.bit_eq(&p));
        assert_eq!(m2, meta);
        save_checkpoint(&b, &loaded, &m2).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn layout_is_magic_length_header_data() {
    let p = build_architecture(16, 16, 1).unwrap();
    let bytes = encode_checkpoint(&p, &CheckpointMeta::default()).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["params"].as_array().unwrap().len(), p.entries().len());
    assert_eq!(bytes.len(), 12 + hlen + 4 * p.num_scalars());
    let first = f32::from_le_bytes(bytes[12 + hlen..16 + hlen].try_into().unwrap());
    assert_eq!(first.to_bits(), p.entries()[0].1.data()[0].to_bits());
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let p = build_architecture(16, 16, 1).unwrap();
    let bytes = encode_checkpoint(&p, &CheckpointMeta::default()).unwrap();
    let path = Path::new("x.sddckpt");
    let fmt = |b: &[u8]| matches!(decode_checkpoint(b, path), Err(Error::Format { .. }));
    assert!(fmt(&bytes[..bytes.len() - 3]));
    assert!(fmt(&[bytes.as_slice(), &[0u8; 4]].concat()));
    assert!(fmt(b"NOTACKPT"));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(fmt(&bad));
}

#[test]
fn wrong_architecture_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sddckpt");
    save_checkpoint(
        &path,
        &build_architecture(16, 16, 0).unwrap(),
        &CheckpointMeta::default(),
    )
    .unwrap();
    let other = Architecture::new(32, 32).unwrap();
    assert!(matches!(
        load_checkpoint_for(&path, other),
        Err(Error::ArchitectureMismatch { .. })
    ));
}

proptest! {
    #[test]
    fn pgm_round_trips_on_the_byte_grid(h in 1usize..20, w in 1usize..20, seed in any::<u32>()) {
        let t = Tensor::from_fn(&[h, w], |i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 256) as f32 / 255.0);
        let bytes = encode_pgm(&t).unwrap();
        prop_assert!(bytes.starts_with(b"P5"));
        let back = decode_pgm(&bytes, Path::new("t.pgm")).unwrap();
        prop_assert!(back.bit_eq(&t));
    }
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec {
        name: "rt".into(),
        texture: Texture::SmoothNoise { scale: 4 },
        defect_classes: vec![DefectClass::GaussianDent, DefectClass::SpeckleCluster],
        defect_rate: 0.4,
        noise_sigma: 0.03,
        seed: 9,
    };
    let data = generate_dataset(&spec, 12, 16, 24).unwrap();
    let manifest = write_dataset(dir.path(), &data).unwrap();
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back, data);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&manifest).unwrap().lines().next().unwrap()).unwrap();
    for key in ["id", "image", "mask", "label", "class", "domain"] {
        assert!(
            first.get(key).is_some() || (key == "class" && first["label"] == 0),
            "{key}"
        );
    }
}

#[test]
fn unlabelled_manifest_records_load() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    let img = Tensor::from_fn(&[8, 8], |i| (i % 256) as f32 / 255.0);
    std::fs::write(dir.path().join("images/a.pgm"), encode_pgm(&img).unwrap()).unwrap();
    std::fs::write(
        dir.path().join("manifest.jsonl"),
        "{\"id\":\"a\",\"image\":\"images/a.pgm\"}\n",
    )
    .unwrap();
    let s = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(s[0].label, None);
    assert_eq!(s[0].image.shape(), [1, 8, 8]);
    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"id\":\"a\",\"image\":\"images/a.pgm\",\"extra\":1}\n",
    )
    .unwrap();
    assert!(matches!(
        read_manifest(&dir.path().join("bad.jsonl")),
        Err(Error::Format { .. })
    ));
}
