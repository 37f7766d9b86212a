//! Trains a source model on the benchmark's labelled source domains and
//! saves it as a checkpoint.
//!
//! cargo run --example pretrain -- /tmp/source.sddckpt

use std::collections::BTreeMap;
use std::path::PathBuf;

use sdd_tta::io::{save_checkpoint, CheckpointMeta};
use sdd_tta::metrics::{evaluate, frozen_scores};
use sdd_tta::pretrain::{pretrain_with_report, PretrainConfig};
use sdd_tta::synth::{make_shift_benchmark_with, BenchmarkConfig};

fn main() -> sdd_tta::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("source.sddckpt"));
    let bench = BenchmarkConfig {
        source_samples: 60,
        target_samples: 60,
        ..BenchmarkConfig::default()
    };
    let b = make_shift_benchmark_with(&bench, 1)?;
    let cfg = PretrainConfig {
        epochs: 20,
        seed: 1,
        ..PretrainConfig::default()
    };
    let (params, report) = pretrain_with_report(&b.source_data, &cfg)?;
    for (e, loss) in report.epoch_loss.iter().enumerate() {
        println!("epoch {e:>2}  loss {loss:.4}");
    }

    let source = evaluate(&frozen_scores(&params, &b.source_data)?, &b.source_data, 0)?;
    let target = evaluate(&frozen_scores(&params, &b.target_stream)?, &b.target_stream, 0)?;
    println!(
        "source AP {:.3}, target AP {:.3}",
        source.ap.unwrap_or(f64::NAN),
        target.ap.unwrap_or(f64::NAN)
    );

    let meta = CheckpointMeta {
        seed: cfg.seed,
        provenance: BTreeMap::from([("example".to_string(), "pretrain".to_string())]),
    };
    save_checkpoint(&out, &params, &meta)?;
    println!("saved {} ({} parameters)", out.display(), params.num_scalars());
    Ok(())
}
