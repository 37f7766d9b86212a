//! Online test-time adaptation: supervisor gating, augmented-mean
//! pseudo-labels, the time-balanced loss and per-sample Adam updates.

use serde::{Deserialize, Serialize};

use crate::augment::{apply, inverse_warp_seg, sample_augs, AugmentationSpec};
use crate::error::{Error, Result};
use crate::net::{forward, forward_recorded, ModelParams, Prediction};
use crate::optim::{AdamConfig, AdamState};
use crate::synth::Sample;
use crate::tensor::{Tensor, PROB_EPS};

/// How the supervisor's share of the pseudo-label depends on its confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FusionWeight {
    /// Always the same weight.
    Constant(f64),
    Rule(FusionRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// `w = 1 - (2c - 1)`: full trust in the supervisor at `c = 0.5`, none at `c = 1`.
    Linear,
}

impl FusionWeight {
    pub fn weight(self, confidence: f64) -> f64 {
        match self {
            FusionWeight::Constant(w) => w,
            FusionWeight::Rule(FusionRule::Linear) => (1.0 - (2.0 * confidence - 1.0)).clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    /// Per-pixel Bernoulli KL with both outcome terms.
    BernoulliKl,
    /// Only the `x log(x / p)` term.
    OneSided,
}

/// Target used when the pseudo-label is the model's own prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTarget {
    /// Thresholded at 0.5.
    Hard,
    /// The raw probabilities; the resulting gradient is zero.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub p_th: f64,
    pub n_aug: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Schedule horizon; the stream length when absent.
    pub horizon_n: Option<usize>,
    pub lambda_min: f64,
    pub seed: u64,
    pub fusion: FusionWeight,
    pub seg_loss: SegLoss,
    pub self_target: SelfTarget,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        AdaptConfig {
            p_th: 0.6,
            n_aug: 4,
            lr: 1e-3,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            horizon_n: None,
            lambda_min: 0.0,
            seed: 0,
            fusion: FusionWeight::Rule(FusionRule::Linear),
            seg_loss: SegLoss::BernoulliKl,
            self_target: SelfTarget::Hard,
        }
    }
}

impl AdaptConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.p_th) {
            return Err(Error::Config(format!("p_th must lie in [0.5, 1), got {}", self.p_th)));
        }
        if self.n_aug == 0 {
            return Err(Error::Config("n_aug must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.horizon_n == Some(0) {
            return Err(Error::Config("horizon_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_min) {
            return Err(Error::Config(format!(
                "lambda_min must lie in [0, 1], got {}",
                self.lambda_min
            )));
        }
        if let FusionWeight::Constant(w) = self.fusion {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!(
                    "constant fusion weight must lie in [0, 1], got {w}"
                )));
            }
        }
        self.adam().validate()
    }
}

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub supervisor_gate: bool,
    pub aug_mean: bool,
    pub dyn_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        supervisor_gate: false,
        aug_mean: false,
        dyn_loss: false,
    };
    pub const ALL: Toggles = Toggles {
        supervisor_gate: true,
        aug_mean: true,
        dyn_loss: true,
    };
}

pub fn confidence(q: f64) -> f64 {
    q.max(1.0 - q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub confidence: f64,
    pub accepted: bool,
    pub supervisor_cls_prob: f64,
    /// The supervisor's full prediction on the original image.
    pub supervisor: Prediction,
}

/// Scores `image` with the frozen supervisor.
pub fn gate(supervisor: &ModelParams, image: &Tensor, p_th: f64) -> Result<GateDecision> {
    let pred = forward(supervisor, image)?;
    let q = pred.cls_prob as f64;
    let c = confidence(q);
    Ok(GateDecision {
        confidence: c,
        accepted: c > p_th,
        supervisor_cls_prob: q,
        supervisor: pred,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// `[h, w]`
    pub seg_target: Tensor,
    pub cls_target: f64,
    pub w_sup: f64,
    pub n_kept_augs: usize,
}

/// Confidence-filtered average of supervisor predictions on augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub seg: Vec<f64>,
    pub cls: f64,
    pub n_kept: usize,
}

/// Runs the supervisor on each augmented view, keeps views whose
/// confidence exceeds `p_th`, warps their maps back and averages per pixel
/// over the views that cover it. With nothing kept, or at pixels no kept
/// view covers, the supervisor's prediction on the original image is used.
pub fn supervisor_ensemble(
    supervisor: &ModelParams,
    image: &Tensor,
    gate: &GateDecision,
    augs: &[AugmentationSpec],
    p_th: f64,
) -> Result<Ensemble> {
    let base = &gate.supervisor;
    let n = base.seg_prob.len();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let mut cls_sum = 0.0f64;
    let mut kept = 0usize;
    for aug in augs {
        let view = apply(aug, image)?;
        let pred = forward(supervisor, &view)?;
        if confidence(pred.cls_prob as f64) <= p_th {
            continue;
        }
        kept += 1;
        cls_sum += pred.cls_prob as f64;
        let (back, valid) = inverse_warp_seg(aug, &pred.seg_prob)?;
        for i in 0..n {
            if valid[i] {
                sum[i] += back.data()[i] as f64;
                count[i] += 1;
            }
        }
    }
    let fallback = |i: usize| base.seg_prob.data()[i] as f64;
    if kept == 0 {
        return Ok(Ensemble {
            seg: (0..n).map(fallback).collect(),
            cls: base.cls_prob as f64,
            n_kept: 0,
        });
    }
    let seg = (0..n)
        .map(|i| {
            if count[i] > 0 {
                sum[i] / count[i] as f64
            } else {
                fallback(i)
            }
        })
        .collect();
    Ok(Ensemble {
        seg,
        cls: cls_sum / kept as f64,
        n_kept: kept,
    })
}

/// `w * a + (1 - w) * b`, exact at `w = 0`, `w = 1` and `a = b`.
fn mix(w: f64, a: f64, b: f64) -> f64 {
    if w >= 1.0 {
        a
    } else if w <= 0.0 {
        b
    } else {
        b + w * (a - b)
    }
}

/// Blends the supervisor ensemble with the model's own prediction.
pub fn fuse(ensemble: &Ensemble, model: &Prediction, w_sup: f64) -> Result<PseudoLabel> {
    if ensemble.seg.len() != model.seg_prob.len() {
        return Err(Error::Contract(format!(
            "ensemble has {} pixels, model map {:?}",
            ensemble.seg.len(),
            model.seg_prob.shape()
        )));
    }
    let seg = ensemble
        .seg
        .iter()
        .zip(model.seg_prob.data())
        .map(|(&e, &m)| mix(w_sup, e, m as f64).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(PseudoLabel {
        seg_target: Tensor::new(model.seg_prob.shape().to_vec(), seg)?,
        cls_target: mix(w_sup, ensemble.cls, model.cls_prob as f64).clamp(0.0, 1.0),
        w_sup,
        n_kept_augs: ensemble.n_kept,
    })
}

/// Pseudo-label for an accepted sample from the supervisor's augmented
/// views and the model's prediction on the original image.
pub fn augmented_mean_prediction(
    supervisor: &ModelParams,
    model: &ModelParams,
    image: &Tensor,
    gate: &GateDecision,
    augs: &[AugmentationSpec],
    cfg: &AdaptConfig,
) -> Result<PseudoLabel> {
    if !gate.accepted {
        return Err(Error::Contract(
            "pseudo-labels are only built for accepted samples".into(),
        ));
    }
    let ens = supervisor_ensemble(supervisor, image, gate, augs, cfg.p_th)?;
    let own = forward(model, image)?;
    fuse(&ens, &own, cfg.fusion.weight(gate.confidence))
}

/// The model's own prediction as a target.
pub fn self_pseudo_label(model: &Prediction, mode: SelfTarget) -> PseudoLabel {
    let harden = |v: f64| match mode {
        SelfTarget::Hard => {
            if v > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        SelfTarget::Soft => v,
    };
    PseudoLabel {
        seg_target: model.seg_prob.map(|v| harden(v as f64) as f32),
        cls_target: harden(model.cls_prob as f64),
        w_sup: 0.0,
        n_kept_augs: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub t: usize,
    pub n: usize,
    pub lambda_min: f64,
}

impl LossSchedule {
    /// `max(lambda_min, 1 - t / N)`
    pub fn lambda_class(&self) -> f64 {
        (1.0 - self.t as f64 / self.n as f64).max(self.lambda_min)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Soft binary cross-entropy of the model's class probability `q` against
/// target `x`.
pub fn loss_class(q: f64, x: f64) -> f64 {
    let q = clamp_prob(q);
    -(x * q.ln() + (1.0 - x) * (1.0 - q).ln())
}

/// Mean per-pixel Bernoulli KL(x || p), or its one-sided form.
pub fn loss_seg(p: &Tensor<f64>, x: &Tensor<f64>, mode: SegLoss) -> Result<f64> {
    if p.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "seg loss maps differ in shape: {:?} vs {:?}",
            p.shape(),
            x.shape()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &xi) in p.data().iter().zip(x.data()) {
        let (pi, xi) = (clamp_prob(pi), clamp_prob(xi));
        acc += xi * (xi / pi).ln();
        if mode == SegLoss::BernoulliKl {
            acc += (1.0 - xi) * ((1.0 - xi) / (1.0 - pi)).ln();
        }
    }
    Ok(acc / p.len() as f64)
}

pub fn total_loss(lc: f64, ls: f64, schedule: &LossSchedule) -> f64 {
    let l = schedule.lambda_class();
    l * lc + (1.0 - l) * ls
}

/// One record of the per-step report stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub id: String,
    pub t: usize,
    pub confidence: f64,
    pub accepted: bool,
    pub poisoned: bool,
    pub w_sup: Option<f64>,
    pub lambda: f64,
    pub n_kept_augs: Option<usize>,
    pub loss_class: Option<f64>,
    pub loss_seg: Option<f64>,
    pub loss_total: Option<f64>,
    /// Emitted defect probability `y_t`.
    pub cls_prob: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub prediction: Prediction,
    pub report: StepReport,
    /// The target the update trained towards, for accepted samples.
    pub pseudo: Option<PseudoLabel>,
}

/// Mixes the run seed with the step index.
fn step_seed(seed: u64, t: usize) -> u64 {
    let mut z = seed ^ (t as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adaptation state carried across a stream: the adapted model, its
/// optimiser moments, the frozen supervisor and the time index.
#[derive(Clone, Debug)]
pub struct OnlineAdapter {
    supervisor: ModelParams,
    model: ModelParams,
    adam: AdamState,
    cfg: AdaptConfig,
    toggles: Toggles,
    horizon: usize,
    t: usize,
}

impl OnlineAdapter {
    /// Model and supervisor both start from `theta0`.
    pub fn new(theta0: &ModelParams, cfg: AdaptConfig, toggles: Toggles, horizon: usize) -> Result<Self> {
        cfg.validate()?;
        if horizon == 0 {
            return Err(Error::Config("schedule horizon must be at least 1".into()));
        }
        theta0.check_fingerprint()?;
        Ok(OnlineAdapter {
            supervisor: theta0.clone(),
            model: theta0.clone(),
            adam: AdamState::new(theta0),
            cfg,
            toggles,
            horizon,
            t: 0,
        })
    }

    pub fn supervisor(&self) -> &ModelParams {
        &self.supervisor
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn schedule(&self) -> LossSchedule {
        LossSchedule {
            t: self.t,
            n: self.horizon,
            lambda_min: self.cfg.lambda_min,
        }
    }

    fn lambda(&self) -> f64 {
        if self.toggles.dyn_loss {
            self.schedule().lambda_class()
        } else {
            0.5
        }
    }

    /// Processes one arriving image and returns the emitted prediction.
    pub fn step(&mut self, id: &str, image: &Tensor) -> Result<StepOutput> {
        let lambda = self.lambda();
        let t = self.t;
        let g = gate(&self.supervisor, image, self.cfg.p_th)?;
        let accepted = g.accepted || !self.toggles.supervisor_gate;
        let mut report = StepReport {
            id: id.to_string(),
            t,
            confidence: g.confidence,
            accepted,
            poisoned: false,
            w_sup: None,
            lambda,
            n_kept_augs: None,
            loss_class: None,
            loss_seg: None,
            loss_total: None,
            cls_prob: 0.0,
        };
        self.t += 1;

        if !accepted {
            let prediction = forward(&self.model, image)?;
            report.cls_prob = prediction.cls_prob as f64;
            return Ok(StepOutput {
                prediction,
                report,
                pseudo: None,
            });
        }

        let mut fwd = forward_recorded(&self.model, image)?;
        let pseudo = if self.toggles.aug_mean {
            let augs = sample_augs(self.cfg.n_aug, step_seed(self.cfg.seed, t))?;
            let accepted_gate = GateDecision { accepted: true, ..g };
            let ens = supervisor_ensemble(&self.supervisor, image, &accepted_gate, &augs, self.cfg.p_th)?;
            fuse(&ens, &fwd.prediction, self.cfg.fusion.weight(accepted_gate.confidence))?
        } else {
            self_pseudo_label(&fwd.prediction, self.cfg.self_target)
        };
        report.w_sup = Some(pseudo.w_sup);
        report.n_kept_augs = Some(pseudo.n_kept_augs);

        let tape = &mut fwd.tape;
        let (sh, sw) = self.model.arch().seg_size();
        let lc = tape.bce(fwd.cls_prob, Tensor::full(&[1, 1], pseudo.cls_target as f32))?;
        let ls = tape.bernoulli_kl(
            fwd.seg_prob,
            pseudo.seg_target.clone().reshape(&[1, 1, sh, sw])?,
            self.cfg.seg_loss == SegLoss::BernoulliKl,
        )?;
        let wc = tape.scale(lc, lambda as f32);
        let ws = tape.scale(ls, (1.0 - lambda) as f32);
        let total = tape.add(wc, ws)?;
        let (lc_v, ls_v, total_v) = (
            tape.value(lc).data()[0] as f64,
            tape.value(ls).data()[0] as f64,
            tape.value(total).data()[0] as f64,
        );
        report.loss_class = Some(lc_v);
        report.loss_seg = Some(ls_v);
        report.loss_total = Some(total_v);

        let poisoned = |report: &mut StepReport, prediction: Prediction| {
            report.poisoned = true;
            report.accepted = false;
            report.cls_prob = prediction.cls_prob as f64;
            StepOutput {
                prediction,
                report: report.clone(),
                pseudo: None,
            }
        };
        if !total_v.is_finite() {
            return Ok(poisoned(&mut report, fwd.prediction));
        }
        let grads = tape.backward(total)?;
        if !grads.all_finite() {
            return Ok(poisoned(&mut report, fwd.prediction));
        }
        let (saved_model, saved_adam) = (self.model.clone(), self.adam.clone());
        self.adam.step(&mut self.model, &grads, self.cfg.lr, &self.cfg.adam())?;
        if !self.model.all_finite() {
            self.model = saved_model;
            self.adam = saved_adam;
            return Ok(poisoned(&mut report, fwd.prediction));
        }
        let prediction = forward(&self.model, image)?;
        report.cls_prob = prediction.cls_prob as f64;
        Ok(StepOutput {
            prediction,
            report,
            pseudo: Some(pseudo),
        })
    }
}

/// Aggregate counts for one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_samples: usize,
    pub n_accepted: usize,
    pub n_poisoned: usize,
    pub horizon_n: usize,
    pub toggles: Toggles,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub predictions: Vec<Prediction>,
    pub steps: Vec<StepReport>,
    pub model: ModelParams,
    pub summary: RunSummary,
}

/// Adapts `theta0` along `stream` in order.
pub fn run_stream(theta0: &ModelParams, stream: &[Sample], cfg: &AdaptConfig, toggles: Toggles) -> Result<RunOutput> {
    if stream.is_empty() {
        return Err(Error::Config("the adaptation stream is empty".into()));
    }
    let horizon = cfg.horizon_n.unwrap_or(stream.len());
    let mut adapter = OnlineAdapter::new(theta0, cfg.clone(), toggles, horizon)?;
    let mut predictions = Vec::with_capacity(stream.len());
    let mut steps = Vec::with_capacity(stream.len());
    for s in stream {
        let out = adapter.step(&s.id, &s.image)?;
        predictions.push(out.prediction);
        steps.push(out.report);
    }
    let summary = RunSummary {
        n_samples: stream.len(),
        n_accepted: steps.iter().filter(|s| s.accepted).count(),
        n_poisoned: steps.iter().filter(|s| s.poisoned).count(),
        horizon_n: horizon,
        toggles,
    };
    Ok(RunOutput {
        predictions,
        steps,
        model: adapter.into_model(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_is_symmetric() {
        assert_eq!(confidence(0.5), 0.5);
        assert_eq!(confidence(0.95), 0.95);
        assert!((confidence(0.05) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn linear_fusion_endpoints() {
        let f = FusionWeight::Rule(FusionRule::Linear);
        assert_eq!(f.weight(1.0), 0.0);
        assert_eq!(f.weight(0.5), 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = |t| LossSchedule {
            t,
            n: 100,
            lambda_min: 0.0,
        };
        assert_eq!(s(0).lambda_class(), 1.0);
        assert_eq!(s(100).lambda_class(), 0.0);
        assert_eq!(s(150).lambda_class(), 0.0);
        assert_eq!(total_loss(2.0, 4.0, &s(25)), 2.5);
    }

    #[test]
    fn class_loss_closed_forms() {
        assert!((loss_class(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss_class(1e-7, 1.0) - 16.118_095_650_958_32).abs() < 1e-6);
        assert!(loss_class(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn single_pixel_kl_is_ln2() {
        let p = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let v = loss_seg(&p, &x, SegLoss::BernoulliKl).unwrap();
        // the target is clamped to 1 - eps like the prediction
        let t = 1.0 - PROB_EPS;
        let want = t * (2.0 * t).ln() + PROB_EPS * (2.0 * PROB_EPS).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn seg_loss_shape_mismatch_is_contract_error() {
        let p = Tensor::<f64>::zeros(&[2, 2]);
        let x = Tensor::<f64>::zeros(&[4, 1]);
        assert!(matches!(
            loss_seg(&p, &x, SegLoss::BernoulliKl),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mix_is_exact_at_endpoints() {
        assert_eq!(mix(1.0, 0.3, 0.9), 0.3);
        assert_eq!(mix(0.0, 0.3, 0.9), 0.9);
        assert_eq!(mix(0.37, 0.3, 0.3), 0.3);
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(0, 0), step_seed(0, 1));
        assert_ne!(step_seed(0, 0), step_seed(1, 0));
    }
}
