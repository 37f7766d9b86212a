//! Image-level metrics and the component ablation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward, ModelParams};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::synth::{make_shift_benchmark_with, BenchmarkConfig, Sample};
use crate::tta::{run_stream, AdaptConfig, Toggles};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    Ok(())
}

/// Image-level average precision.
///
/// Samples are ranked by descending score with ties broken pessimistically
/// (positives after negatives); AP is the mean, over positives, of the
/// precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("NaN rejected above")
            .then(labels[a].cmp(&labels[b]))
    });
    let mut tp = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            acc += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / n_pos as f64)
}

/// Fraction of samples where `score > threshold` agrees with the label.
pub fn classification_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Counts::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub n: usize,
    /// Fraction classified correctly at the default threshold.
    pub accuracy: f64,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when the set has no positives.
    pub ap: Option<f64>,
    pub classification_accuracy: f64,
    pub counts: Counts,
    pub n_samples: usize,
    pub n_adapted: usize,
    /// Keyed by defect class, `"none"` for defect-free samples.
    pub per_class: BTreeMap<String, ClassBreakdown>,
}

/// Scores labelled samples. `n_adapted` is passed through from the run.
pub fn evaluate(scores: &[f64], samples: &[Sample], n_adapted: usize) -> Result<MetricsReport> {
    if scores.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} samples",
            scores.len(),
            samples.len()
        )));
    }
    let labels = samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Data(format!("sample {} has no label to evaluate against", s.id)))
        })
        .collect::<Result<Vec<bool>>>()?;
    let ap = match average_precision(scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let mut groups: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    for ((s, &l), &score) in samples.iter().zip(&labels).zip(scores) {
        let key = s.class.map_or("none", |c| c.name()).to_string();
        let g = groups.entry(key).or_insert((0, 0, 0.0));
        g.0 += 1;
        g.1 += ((score > DEFAULT_THRESHOLD) == l) as usize;
        g.2 += score;
    }
    let per_class = groups
        .into_iter()
        .map(|(k, (n, ok, sum))| {
            (
                k,
                ClassBreakdown {
                    n,
                    accuracy: ok as f64 / n as f64,
                    mean_score: sum / n as f64,
                },
            )
        })
        .collect();
    Ok(MetricsReport {
        ap,
        classification_accuracy: classification_accuracy(scores, &labels, DEFAULT_THRESHOLD)?,
        counts: Counts::at(scores, &labels, DEFAULT_THRESHOLD),
        n_samples: samples.len(),
        n_adapted,
        per_class,
    })
}

/// Defect probabilities of a fixed model, without adaptation.
pub fn frozen_scores(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| forward(params, &s.image).map(|p| p.cls_prob as f64))
        .collect()
}

/// The cumulative component settings, in table order.
pub const ABLATION_SETTINGS: [(&str, Toggles); 4] = [
    ("none", Toggles::NONE),
    (
        "+gate",
        Toggles {
            supervisor_gate: true,
            aug_mean: false,
            dyn_loss: false,
        },
    ),
    (
        "+gate+aug",
        Toggles {
            supervisor_gate: true,
            aug_mean: true,
            dyn_loss: false,
        },
    ),
    ("all", Toggles::ALL),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// `None` for the frozen-model row.
    pub toggles: Option<Toggles>,
    pub ap: Vec<f64>,
    pub ca: Vec<f64>,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub ca_mean: f64,
    pub ca_std: f64,
}

impl AblationRow {
    fn new(setting: &str, toggles: Option<Toggles>) -> Self {
        AblationRow {
            setting: setting.to_string(),
            toggles,
            ap: Vec::new(),
            ca: Vec::new(),
            ap_mean: 0.0,
            ap_std: 0.0,
            ca_mean: 0.0,
            ca_std: 0.0,
        }
    }

    fn finish(&mut self) {
        (self.ap_mean, self.ap_std) = mean_std(&self.ap);
        (self.ca_mean, self.ca_std) = mean_std(&self.ca);
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub frozen: AblationRow,
    /// The four cumulative settings, in order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}

/// Frozen and per-setting metrics for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub frozen: (f64, f64),
    /// `(ap, ca)` per setting in [`ABLATION_SETTINGS`] order.
    pub settings: Vec<(f64, f64)>,
}

fn ap_ca(scores: &[f64], samples: &[Sample]) -> Result<(f64, f64)> {
    let m = evaluate(scores, samples, 0)?;
    let ap =
        m.ap.ok_or_else(|| Error::UndefinedMetric("the evaluation stream has no positives".into()))?;
    Ok((ap, m.classification_accuracy))
}

/// Runs all four settings on one stream with adaptation seed `seed`.
pub fn ablation_seed(theta0: &ModelParams, stream: &[Sample], seed: u64, cfg: &AdaptConfig) -> Result<SeedResult> {
    let frozen = ap_ca(&frozen_scores(theta0, stream)?, stream)?;
    let cfg = AdaptConfig { seed, ..cfg.clone() };
    let mut settings = Vec::with_capacity(ABLATION_SETTINGS.len());
    for (name, toggles) in ABLATION_SETTINGS {
        let out = run_stream(theta0, stream, &cfg, toggles)
            .map_err(|e| e.context(format!("ablation setting {name}, seed {seed}")))?;
        let scores: Vec<f64> = out.predictions.iter().map(|p| p.cls_prob as f64).collect();
        settings.push(ap_ca(&scores, stream)?);
    }
    Ok(SeedResult { seed, frozen, settings })
}

pub fn tabulate(results: &[SeedResult]) -> Result<AblationTable> {
    if results.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut frozen = AblationRow::new("frozen", None);
    let mut rows: Vec<AblationRow> = ABLATION_SETTINGS
        .iter()
        .map(|(n, t)| AblationRow::new(n, Some(*t)))
        .collect();
    for r in results {
        frozen.ap.push(r.frozen.0);
        frozen.ca.push(r.frozen.1);
        for (row, &(ap, ca)) in rows.iter_mut().zip(&r.settings) {
            row.ap.push(ap);
            row.ca.push(ca);
        }
    }
    frozen.finish();
    rows.iter_mut().for_each(AblationRow::finish);
    Ok(AblationTable {
        seeds: results.iter().map(|r| r.seed).collect(),
        frozen,
        rows,
    })
}

/// The ablation on a fixed checkpoint and stream; seeds vary only the
/// augmentation draws.
pub fn run_ablation(
    theta0: &ModelParams,
    stream: &[Sample],
    seeds: &[u64],
    cfg: &AdaptConfig,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let results = seeds
        .iter()
        .map(|&s| ablation_seed(theta0, stream, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    tabulate(&results)
}

/// One full benchmark replicate: generate the shift benchmark, pretrain on
/// its source domains and run the ablation on its target stream, all
/// seeded by `seed`.
pub fn benchmark_seed(
    seed: u64,
    bench: &BenchmarkConfig,
    pretrain_cfg: &PretrainConfig,
    adapt_cfg: &AdaptConfig,
) -> Result<SeedResult> {
    let b = make_shift_benchmark_with(bench, seed)?;
    let theta0 = pretrain(
        &b.source_data,
        &PretrainConfig {
            seed,
            ..pretrain_cfg.clone()
        },
    )?;
    ablation_seed(&theta0, &b.target_stream, seed, adapt_cfg)
}
