//! Adapts a freshly trained model one sample at a time and shows what the
//! gate, the augmented ensemble and the loss schedule do at each step.

use sdd_tta::pretrain::{pretrain, PretrainConfig};
use sdd_tta::synth::{make_shift_benchmark_with, BenchmarkConfig};
use sdd_tta::tta::{AdaptConfig, OnlineAdapter, Toggles};

fn main() -> sdd_tta::Result<()> {
    let bench = BenchmarkConfig {
        source_samples: 60,
        target_samples: 40,
        ..BenchmarkConfig::default()
    };
    let b = make_shift_benchmark_with(&bench, 2)?;
    let theta0 = pretrain(
        &b.source_data,
        &PretrainConfig {
            epochs: 20,
            ..PretrainConfig::default()
        },
    )?;

    let mut adapter = OnlineAdapter::new(&theta0, AdaptConfig::default(), Toggles::ALL, b.target_stream.len())?;
    println!("  t  label  conf  accepted  kept  w_sup  lambda    loss   y_t");
    for s in &b.target_stream {
        let out = adapter.step(&s.id, &s.image)?;
        let r = &out.report;
        let label = match s.label {
            Some(true) => "def",
            Some(false) => "ok",
            None => "?",
        };
        println!(
            "{:>3}  {:>5}  {:.3}  {:>8}  {:>4}  {:>5}  {:.3}  {:>6}  {:.3}",
            r.t,
            label,
            r.confidence,
            r.accepted,
            r.n_kept_augs.map_or("-".into(), |n| n.to_string()),
            r.w_sup.map_or("-".into(), |w| format!("{w:.2}")),
            r.lambda,
            r.loss_total.map_or("-".into(), |l| format!("{l:.3}")),
            r.cls_prob
        );
    }
    assert!(adapter.supervisor().bit_eq(&theta0));
    Ok(())
}
