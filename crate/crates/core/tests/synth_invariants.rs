use proptest::prelude::*;
use sdd_tta::synth::{
    generate_dataset, make_shift_benchmark_with, positive_count, shift_domains, BenchmarkConfig, DefectClass,
    DomainSpec, Texture,
};

fn textures() -> impl Strategy<Value = Texture> {
    prop_oneof![
        (0.0f64..180.0, 2.0f64..10.0).prop_map(|(a, f)| Texture::Stripes {
            angle_deg: a,
            frequency: f
        }),
        (2usize..16).prop_map(|c| Texture::Checker { cell: c }),
        (2usize..16).prop_map(|s| Texture::SmoothNoise { scale: s }),
        (0.0f64..360.0).prop_map(|d| Texture::Gradient { direction_deg: d }),
    ]
}

fn classes() -> impl Strategy<Value = Vec<DefectClass>> {
    prop::sample::subsequence(
        vec![
            DefectClass::EllipseBlob,
            DefectClass::ScratchLine,
            DefectClass::GaussianDent,
            DefectClass::SpeckleCluster,
        ],
        1..=4,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_consistent(
        texture in textures(), defect_classes in classes(),
        rate in 0.05f64..0.95, noise in 0.0f64..0.08, seed in any::<u64>(), n in 1usize..24,
    ) {
        let spec = DomainSpec { name: "d".into(), texture, defect_classes, defect_rate: rate, noise_sigma: noise, seed };
        let data = generate_dataset(&spec, n, 32, 24).unwrap();
        prop_assert_eq!(data.len(), n);
        prop_assert_eq!(data.iter().filter(|s| s.label == Some(true)).count(), positive_count(n, rate));
        for s in &data {
            prop_assert_eq!(s.image.shape(), [1, 32, 24]);
            prop_assert!(s.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            // every value sits on the 8-bit grid
            prop_assert!(s.image.data().iter().all(|&v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
            let mask = s.mask.as_ref().unwrap();
            let on = mask.data().iter().filter(|&&m| m == 1.0).count();
            prop_assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            prop_assert_eq!(s.label == Some(true), on >= 1);
            prop_assert_eq!(s.class.is_some(), s.label == Some(true));
            if let Some(c) = s.class {
                prop_assert!(spec.defect_classes.contains(&c));
            }
        }
        prop_assert_eq!(&data, &generate_dataset(&spec, n, 32, 24).unwrap());
    }
}

#[test]
fn kolektor_like_balance() {
    let spec = DomainSpec {
        name: "k".into(),
        texture: Texture::Checker { cell: 8 },
        defect_classes: vec![DefectClass::ScratchLine],
        defect_rate: 0.13,
        noise_sigma: 0.02,
        seed: 1,
    };
    assert_eq!(positive_count(399, 0.13), 52);
    let data = generate_dataset(&spec, 399, 16, 16).unwrap();
    assert_eq!(data.iter().filter(|s| s.label == Some(true)).count(), 52);
}

#[test]
fn empty_class_list_with_defects_is_a_config_error() {
    let spec = DomainSpec {
        name: "e".into(),
        texture: Texture::Gradient { direction_deg: 0.0 },
        defect_classes: vec![],
        defect_rate: 0.2,
        noise_sigma: 0.0,
        seed: 0,
    };
    assert!(matches!(
        generate_dataset(&spec, 4, 16, 16),
        Err(sdd_tta::Error::Config(_))
    ));
    assert!(generate_dataset(
        &DomainSpec {
            defect_classes: vec![DefectClass::EllipseBlob],
            ..spec
        },
        4,
        12,
        16
    )
    .is_err());
}

#[test]
fn target_pairs_never_occur_in_source() {
    for seed in 0..5 {
        let (source, target) = shift_domains(seed);
        for s in &source {
            for c in &target.defect_classes {
                assert!(!(s.texture == target.texture && s.defect_classes.contains(c)));
            }
        }
    }
    let small = BenchmarkConfig {
        source_samples: 10,
        target_samples: 20,
        height: 16,
        width: 16,
    };
    let b = make_shift_benchmark_with(&small, 3).unwrap();
    assert_eq!(b.source_data.len(), 20);
    assert_eq!(b.target_stream.len(), 20);
    let again = make_shift_benchmark_with(&small, 3).unwrap();
    let ids = |v: &[sdd_tta::synth::Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&b.target_stream), ids(&again.target_stream));
    assert_eq!(b.target_stream, again.target_stream);
}
