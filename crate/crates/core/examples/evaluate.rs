//! Frozen model against the adapted one on a labelled target stream, with
//! the per-class breakdown.

use sdd_tta::metrics::{evaluate, frozen_scores, MetricsReport};
use sdd_tta::pretrain::{pretrain, PretrainConfig};
use sdd_tta::synth::{make_shift_benchmark_with, BenchmarkConfig};
use sdd_tta::tta::{run_stream, AdaptConfig, Toggles};

fn show(name: &str, m: &MetricsReport) {
    println!(
        "{name:<8} AP {:.3}  CA {:.3}  (tp {} fp {} tn {} fn {})",
        m.ap.unwrap_or(f64::NAN),
        m.classification_accuracy,
        m.counts.tp,
        m.counts.fp,
        m.counts.tn,
        m.counts.fn_
    );
    for (class, c) in &m.per_class {
        println!(
            "         {class:<16} n {:>3}  acc {:.3}  mean score {:.3}",
            c.n, c.accuracy, c.mean_score
        );
    }
}

fn main() -> sdd_tta::Result<()> {
    let bench = BenchmarkConfig {
        source_samples: 80,
        target_samples: 100,
        ..BenchmarkConfig::default()
    };
    let b = make_shift_benchmark_with(&bench, 3)?;
    let theta0 = pretrain(
        &b.source_data,
        &PretrainConfig {
            epochs: 20,
            ..PretrainConfig::default()
        },
    )?;

    let frozen = evaluate(&frozen_scores(&theta0, &b.target_stream)?, &b.target_stream, 0)?;
    let run = run_stream(&theta0, &b.target_stream, &AdaptConfig::default(), Toggles::ALL)?;
    let scores: Vec<f64> = run.steps.iter().map(|s| s.cls_prob).collect();
    let adapted = evaluate(&scores, &b.target_stream, run.summary.n_accepted)?;

    show("frozen", &frozen);
    show("adapted", &adapted);
    println!(
        "{} of {} samples updated the model",
        adapted.n_adapted, adapted.n_samples
    );
    Ok(())
}
