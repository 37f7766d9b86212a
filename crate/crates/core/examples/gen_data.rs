//! Generates a small shift benchmark and writes it as two PGM datasets.
//!
//! cargo run --example gen_data -- /tmp/sdd-data

use std::path::PathBuf;

use sdd_tta::io::write_dataset;
use sdd_tta::synth::{make_shift_benchmark_with, BenchmarkConfig};

fn main() -> sdd_tta::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sdd-data"));
    let cfg = BenchmarkConfig {
        source_samples: 40,
        target_samples: 60,
        ..BenchmarkConfig::default()
    };
    let b = make_shift_benchmark_with(&cfg, 7)?;

    for d in &b.source {
        println!("source {:<12} {:?} classes {:?}", d.name, d.texture, d.defect_classes);
    }
    println!(
        "target {:<12} {:?} classes {:?}",
        b.target.name, b.target.texture, b.target.defect_classes
    );

    let positives = b.target_stream.iter().filter(|s| s.label == Some(true)).count();
    println!("{} target samples, {} defective", b.target_stream.len(), positives);

    let src = write_dataset(&out.join("source"), &b.source_data)?;
    let tgt = write_dataset(&out.join("target"), &b.target_stream)?;
    println!("wrote {} and {}", src.display(), tgt.display());
    Ok(())
}
