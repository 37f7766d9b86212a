//! Draws the test-time augmentations for one image, writes each view as a
//! PGM, and maps a warped mask back to the original frame.

use std::path::PathBuf;

use sdd_tta::augment::{apply, inverse_warp_seg, sample_augs, warp_seg};
use sdd_tta::io::{create_dir, write_pgm};
use sdd_tta::synth::{generate_dataset, DefectClass, DomainSpec, Texture};

fn main() -> sdd_tta::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sdd-augs"));
    create_dir(&out)?;
    let spec = DomainSpec {
        name: "demo".into(),
        texture: Texture::Stripes {
            angle_deg: 30.0,
            frequency: 5.0,
        },
        defect_classes: vec![DefectClass::EllipseBlob],
        defect_rate: 0.5,
        noise_sigma: 0.02,
        seed: 5,
    };
    let sample = generate_dataset(&spec, 2, 64, 64)?
        .into_iter()
        .find(|s| s.label == Some(true))
        .expect("half the samples are defective");
    let mask = sample.mask.clone().unwrap();
    write_pgm(&out.join("original.pgm"), &sample.image)?;

    for (i, aug) in sample_augs(6, 11)?.iter().enumerate() {
        let view = apply(aug, &sample.image)?;
        write_pgm(&out.join(format!("view{i}.pgm")), &view)?;
        let (back, valid) = inverse_warp_seg(aug, &warp_seg(aug, &mask)?)?;
        let agree = back
            .data()
            .iter()
            .zip(mask.data())
            .zip(&valid)
            .filter(|((b, m), &v)| v && (**b > 0.5) == (**m > 0.5))
            .count();
        let n_valid = valid.iter().filter(|&&v| v).count();
        println!("view{i} {:?}: mask agrees on {agree}/{n_valid} valid pixels", aug.kind);
    }
    println!("views written under {}", out.display());
    Ok(())
}
