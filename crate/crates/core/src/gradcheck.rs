//! Central finite-difference verification of the tape's gradients, per
//! layer and for the composed network, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{build_architecture, forward_recorded, ModelParams};
use crate::tensor::{NodeId, Padding, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding compare absolutely.
    pub denom_floor: f64,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-4,
            tolerance: 1e-6,
            denom_floor: 1e-3,
            input_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub n_checked: usize,
    /// Coordinates whose perturbation crossed a ReLU, pooling or clamp
    /// boundary, where a central difference does not estimate the gradient.
    pub n_skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub checks: Vec<CheckResult>,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder<'a> = dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn evaluate(params: &[(String, Tensor<f64>)], build: &Builder) -> Result<(Tape<f64>, NodeId)> {
    let mut tape = Tape::new();
    let ids = params
        .iter()
        .map(|(n, t)| tape.param(n.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    Ok((tape, loss))
}

/// Compares every coordinate's analytic gradient with a central difference.
pub fn check_function(
    name: &str,
    params: Vec<(String, Tensor<f64>)>,
    build: &Builder,
    cfg: &GradcheckConfig,
) -> Result<CheckResult> {
    let (tape, loss) = evaluate(&params, build)?;
    let pattern = tape.activation_pattern();
    let grads = tape.backward(loss)?;
    let mut result = CheckResult {
        name: name.to_string(),
        n_checked: 0,
        n_skipped: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        passed: true,
    };
    let mut work = params.clone();
    for (pi, (pname, _)) in params.iter().enumerate() {
        let g = grads
            .get(pname)
            .ok_or_else(|| Error::Contract(format!("no gradient for {pname}")))?
            .clone();
        for k in 0..g.len() {
            let orig = work[pi].1.data()[k];
            let mut probe = |delta: f64| -> Result<(f64, u64)> {
                work[pi].1.data_mut()[k] = orig + delta;
                let (t, l) = evaluate(&work, build)?;
                Ok((t.value(l).data()[0], t.activation_pattern()))
            };
            let (fp, pp) = probe(cfg.h)?;
            let (fm, pm) = probe(-cfg.h)?;
            work[pi].1.data_mut()[k] = orig;
            if pp != pattern || pm != pattern {
                result.n_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let analytic = g.data()[k];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
            result.n_checked += 1;
            result.max_abs_err = result.max_abs_err.max(abs);
            result.max_rel_err = result.max_rel_err.max(rel);
        }
    }
    result.passed = result.max_rel_err <= cfg.tolerance && result.n_checked > 0;
    Ok(result)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries
/// a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Each tape operation in isolation.
pub fn layer_checks(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);

    let conv = named(vec![("x", r(&[2, 3, 5, 6])), ("k", r(&[4, 3, 3, 3])), ("b", r(&[4]))]);
    out.push(check_function(
        "conv2d_same",
        conv.clone(),
        &|t, p| {
            let y = t.conv2d(p[0], p[1], p[2], Padding::Same)?;
            project(t, y, 1)
        },
        cfg,
    )?);
    out.push(check_function(
        "conv2d_valid",
        conv,
        &|t, p| {
            let y = t.conv2d(p[0], p[1], p[2], Padding::Valid)?;
            project(t, y, 2)
        },
        cfg,
    )?);
    out.push(check_function(
        "conv2d_1x1",
        named(vec![("x", r(&[1, 4, 3, 3])), ("k", r(&[2, 4, 1, 1])), ("b", r(&[2]))]),
        &|t, p| {
            let y = t.conv2d(p[0], p[1], p[2], Padding::Same)?;
            project(t, y, 3)
        },
        cfg,
    )?);
    out.push(check_function(
        "relu",
        named(vec![("x", r(&[2, 3, 4, 4]))]),
        &|t, p| {
            let y = t.relu(p[0]);
            project(t, y, 4)
        },
        cfg,
    )?);
    out.push(check_function(
        "maxpool2",
        named(vec![("x", r(&[1, 2, 4, 6]))]),
        &|t, p| {
            let y = t.maxpool2(p[0])?;
            project(t, y, 5)
        },
        cfg,
    )?);
    out.push(check_function(
        "global_avg_pool",
        named(vec![("x", r(&[2, 3, 3, 4]))]),
        &|t, p| {
            let y = t.global_avg_pool(p[0])?;
            project(t, y, 6)
        },
        cfg,
    )?);
    out.push(check_function(
        "global_max_pool",
        named(vec![("x", r(&[2, 3, 3, 4]))]),
        &|t, p| {
            let y = t.global_max_pool(p[0])?;
            project(t, y, 7)
        },
        cfg,
    )?);
    out.push(check_function(
        "concat_channels",
        named(vec![("a", r(&[1, 2, 3, 3])), ("b", r(&[1, 1, 3, 3]))]),
        &|t, p| {
            let y = t.concat_channels(&[p[0], p[1]])?;
            project(t, y, 8)
        },
        cfg,
    )?);
    out.push(check_function(
        "linear",
        named(vec![("x", r(&[2, 5])), ("w", r(&[3, 5])), ("b", r(&[3]))]),
        &|t, p| {
            let y = t.linear(p[0], p[1], p[2])?;
            project(t, y, 9)
        },
        cfg,
    )?);
    out.push(check_function(
        "sigmoid",
        named(vec![("x", r(&[3, 4]).map(|v| 4.0 * v))]),
        &|t, p| {
            let y = t.sigmoid(p[0]);
            project(t, y, 10)
        },
        cfg,
    )?);
    out.push(check_function(
        "log_softmax",
        named(vec![("x", r(&[3, 5]).map(|v| 3.0 * v))]),
        &|t, p| {
            let y = t.log_softmax(p[0])?;
            project(t, y, 11)
        },
        cfg,
    )?);
    out.push(check_function(
        "add_mul_scale_mean",
        named(vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))]),
        &|t, p| {
            let s = t.add(p[0], p[1])?;
            let m = t.mul(s, p[0])?;
            let k = t.scale(m, 0.7);
            Ok(t.mean(k))
        },
        cfg,
    )?);
    let target = rand_tensor(&mut rng, &[2, 3], 0.0, 1.0);
    let logits = named(vec![("x", rand_tensor(&mut rng, &[2, 3], -3.0, 3.0))]);
    out.push(check_function(
        "bce",
        logits.clone(),
        &|t, p| {
            let q = t.sigmoid(p[0]);
            t.bce(q, target.clone())
        },
        cfg,
    )?);
    for (name, full) in [("bernoulli_kl", true), ("bernoulli_kl_one_sided", false)] {
        out.push(check_function(
            name,
            logits.clone(),
            &|t, p| {
                let q = t.sigmoid(p[0]);
                t.bernoulli_kl(q, target.clone(), full)
            },
            cfg,
        )?);
    }
    Ok(out)
}

/// The adaptation loss on the whole network: a time-weighted mix of the
/// class cross-entropy and the segmentation divergence against random soft
/// targets.
pub fn network_check(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let size = cfg.input_size;
    let params: ModelParams<f64> = build_architecture(size, size, cfg.seed)?.cast();
    let arch = params.arch();
    let (sh, sw) = arch.seg_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let image = rand_tensor(&mut rng, &[1, size, size], 0.0, 1.0);
    let seg_target = rand_tensor(&mut rng, &[1, 1, sh, sw], 0.0, 1.0);
    let cls_target = rng.gen_range(0.0..1.0);
    let lambda = 0.3;

    let build = |t: &mut Tape<f64>, p: &[NodeId]| -> Result<NodeId> {
        // rebuild the net on the caller's tape from its parameter nodes
        let entries = p
            .iter()
            .zip(params.entries())
            .map(|(&id, (n, _))| (n.clone(), t.value(id).clone()))
            .collect();
        let local = ModelParams::from_entries(arch, entries)?;
        let mut fwd = forward_recorded(&local, &image)?;
        let lc = fwd.tape.bce(fwd.cls_prob, Tensor::full(&[1, 1], cls_target))?;
        let ls = fwd.tape.bernoulli_kl(fwd.seg_prob, seg_target.clone(), true)?;
        let a = fwd.tape.scale(lc, lambda);
        let b = fwd.tape.scale(ls, 1.0 - lambda);
        let total = fwd.tape.add(a, b)?;
        *t = fwd.tape;
        Ok(total)
    };
    check_function("two_stage_network", params.entries().to_vec(), &build, cfg)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.h > 0.0) || !(cfg.tolerance > 0.0) || !(cfg.denom_floor > 0.0) {
        return Err(Error::Config(
            "gradcheck h, tolerance and denom_floor must be positive".into(),
        ));
    }
    let mut checks = layer_checks(cfg)?;
    checks.push(network_check(cfg)?);
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        config: cfg.clone(),
        checks,
        max_rel_err,
        passed,
    })
}
