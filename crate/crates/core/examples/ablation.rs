//! The four-setting component ablation on a reduced benchmark, three seeds.
//! The full-size run is `sdd-tta ablate --report <dir>`.

use sdd_tta::metrics::{benchmark_seed, tabulate, AblationRow};
use sdd_tta::pretrain::PretrainConfig;
use sdd_tta::synth::BenchmarkConfig;
use sdd_tta::tta::AdaptConfig;

fn line(r: &AblationRow) {
    println!(
        "{:<10} AP {:.3} ± {:.3}   CA {:.3} ± {:.3}",
        r.setting, r.ap_mean, r.ap_std, r.ca_mean, r.ca_std
    );
}

fn main() -> sdd_tta::Result<()> {
    let bench = BenchmarkConfig {
        source_samples: 60,
        target_samples: 80,
        height: 32,
        width: 32,
    };
    let pre = PretrainConfig {
        epochs: 10,
        ..PretrainConfig::default()
    };
    let results = [0, 1, 2]
        .iter()
        .map(|&seed| benchmark_seed(seed, &bench, &pre, &AdaptConfig::default()))
        .collect::<sdd_tta::Result<Vec<_>>>()?;
    let table = tabulate(&results)?;
    line(&table.frozen);
    for r in &table.rows {
        line(r);
    }
    Ok(())
}
