//! Wengert-list reverse-mode differentiation.
//!
//! Every builder method evaluates its op immediately, stores the result as a
//! new node and records what the backward rule needs. Node ids are handed out
//! in execution order, so the list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use super::kernels::{self, ConvGeom, Padding};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by the cross-entropy and divergence losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(NodeId),
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Concat(Vec<NodeId>),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    LogSoftmax(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Bce {
        prob: NodeId,
        target: Tensor<T>,
    },
    BernoulliKl {
        prob: NodeId,
        target: Tensor<T>,
        full: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

/// `dLoss/dparam` for every parameter registered on a tape, in registration
/// order.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Wraps externally combined gradients, e.g. a batch mean.
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: NodeId) -> Result<Gradients<T>> {
    tape.backward(loss)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        let id = self.push(value, Op::Param, true);
        self.params.push((name, id));
        Ok(id)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, padding: Padding) -> Result<NodeId> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = kernels::conv_geom(x, k, b, padding)?;
        let out = kernels::conv2d_forward(x, k, b, padding)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = kernels::relu(self.value(input));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::global_avg_pool(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn global_max_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::global_max_pool_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalMaxPool { input, argmax }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = kernels::concat_channels(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(kernels::sigmoid_scalar);
        let rg = self.rg(&[input]);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn log_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::log_softmax(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::LogSoftmax(input), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy `-[x ln p + (1-x) ln(1-p)]` of probabilities
    /// against a fixed soft target. `p` is clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, prob: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let p = self.value(prob);
        check_target("bce", p, &target)?;
        let eps = T::from_f64(PROB_EPS);
        let one = T::one();
        let total = p.data().iter().zip(target.data()).fold(T::zero(), |acc, (&pv, &x)| {
            let pc = clamp_prob(pv, eps);
            acc - (x * pc.ln() + (one - x) * (one - pc).ln())
        });
        let out = Tensor::scalar(total / T::from_f64(p.len() as f64));
        let rg = self.rg(&[prob]);
        Ok(self.push(out, Op::Bce { prob, target }, rg))
    }

    /// Mean per-element Bernoulli divergence `KL(x || p)`.
    ///
    /// With `full = false` only the `x ln(x/p)` term is kept. Both maps are
    /// clamped to `[1e-7, 1-1e-7]`.
    pub fn bernoulli_kl(&mut self, prob: NodeId, target: Tensor<T>, full: bool) -> Result<NodeId> {
        let p = self.value(prob);
        check_target("bernoulli_kl", p, &target)?;
        let eps = T::from_f64(PROB_EPS);
        let total = p.data().iter().zip(target.data()).fold(T::zero(), |acc, (&pv, &xv)| {
            acc + kl_term(clamp_prob(xv, eps), clamp_prob(pv, eps), full)
        });
        let out = Tensor::scalar(total / T::from_f64(p.len() as f64));
        let rg = self.rg(&[prob]);
        Ok(self.push(out, Op::BernoulliKl { prob, target, full }, rg))
    }

    /// Exact reverse-mode gradients of a scalar node w.r.t. every parameter
    /// registered on this tape. Parameters the loss does not depend on get
    /// exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => param_grads[id] = Some(g),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = kernels::conv2d_backward(self.value(*input), self.value(*kernel), geom, &g, need_input);
                    if let Some(gi) = cg.input {
                        self.acc(&mut grads, *input, gi);
                    }
                    self.acc(&mut grads, *kernel, cg.kernel);
                    self.acc(&mut grads, *bias, cg.bias);
                }
                Op::Relu(input) => {
                    let y = node.value.data();
                    let gi = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *input, gi);
                }
                Op::MaxPool2 { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                    let mut gi = vec![T::zero(); self.value(*input).len()];
                    for (&gv, &a) in g.iter().zip(argmax) {
                        gi[a as usize] = gi[a as usize] + gv;
                    }
                    self.acc(&mut grads, *input, gi);
                }
                Op::GlobalAvgPool(input) => {
                    let x = self.value(*input);
                    let area = x.shape()[2] * x.shape()[3];
                    let inv = T::one() / T::from_f64(area as f64);
                    let mut gi = Vec::with_capacity(x.len());
                    for &gv in &g {
                        gi.extend(std::iter::repeat_n(gv * inv, area));
                    }
                    self.acc(&mut grads, *input, gi);
                }
                Op::Concat(inputs) => {
                    let n = node.value.shape()[0];
                    let inner: usize = node.value.shape()[2..].iter().product();
                    let total_c = node.value.shape()[1];
                    let mut offset = 0;
                    for &inp in inputs {
                        let c = self.value(inp).shape()[1];
                        if self.nodes[inp.0].requires_grad {
                            let mut gi = Vec::with_capacity(n * c * inner);
                            for b in 0..n {
                                let start = (b * total_c + offset) * inner;
                                gi.extend_from_slice(&g[start..start + c * inner]);
                            }
                            self.acc(&mut grads, inp, gi);
                        }
                        offset += c;
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    let (n, fin) = (x.shape()[0], x.shape()[1]);
                    let fout = w.shape()[0];
                    let mut gx = vec![T::zero(); n * fin];
                    let mut gw = vec![T::zero(); fout * fin];
                    let mut gb = vec![T::zero(); fout];
                    for b in 0..n {
                        let xr = &x.data()[b * fin..(b + 1) * fin];
                        for o in 0..fout {
                            let gv = g[b * fout + o];
                            gb[o] = gb[o] + gv;
                            let wr = &w.data()[o * fin..(o + 1) * fin];
                            for i in 0..fin {
                                gw[o * fin + i] = gw[o * fin + i] + gv * xr[i];
                                gx[b * fin + i] = gx[b * fin + i] + gv * wr[i];
                            }
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                    self.acc(&mut grads, *weight, gw);
                    self.acc(&mut grads, *bias, gb);
                }
                Op::Sigmoid(input) => {
                    let bound = T::from_f64(kernels::SIGMOID_CLAMP);
                    let x = self.value(*input).data();
                    let s = node.value.data();
                    let gi = g
                        .iter()
                        .zip(s)
                        .zip(x)
                        .map(|((&gv, &sv), &xv)| {
                            if xv > -bound && xv < bound {
                                gv * sv * (T::one() - sv)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.acc(&mut grads, *input, gi);
                }
                Op::LogSoftmax(input) => {
                    let y = node.value.data();
                    let k = *node.value.shape().last().unwrap();
                    let mut gi = Vec::with_capacity(y.len());
                    for (gr, yr) in g.chunks(k).zip(y.chunks(k)) {
                        let gs = gr.iter().fold(T::zero(), |a, &v| a + v);
                        gi.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * gs));
                    }
                    self.acc(&mut grads, *input, gi);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect();
                    let gb = g.iter().zip(va).map(|(&gv, &x)| gv * x).collect();
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|&gv| gv * *c).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let v = g[0] / T::from_f64(n as f64);
                    self.acc(&mut grads, *a, vec![v; n]);
                }
                Op::Bce { prob, target } => {
                    let p = self.value(*prob).data();
                    let eps = T::from_f64(PROB_EPS);
                    let scale = g[0] / T::from_f64(p.len() as f64);
                    let one = T::one();
                    let gi = p
                        .iter()
                        .zip(target.data())
                        .map(|(&pv, &x)| {
                            if inside_clamp(pv, eps) {
                                scale * ((one - x) / (one - pv) - x / pv)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.acc(&mut grads, *prob, gi);
                }
                Op::BernoulliKl { prob, target, full } => {
                    let p = self.value(*prob).data();
                    let eps = T::from_f64(PROB_EPS);
                    let scale = g[0] / T::from_f64(p.len() as f64);
                    let one = T::one();
                    let gi = p
                        .iter()
                        .zip(target.data())
                        .map(|(&pv, &xv)| {
                            if !inside_clamp(pv, eps) {
                                return T::zero();
                            }
                            let x = clamp_prob(xv, eps);
                            let d = if *full {
                                (one - x) / (one - pv) - x / pv
                            } else {
                                -x / pv
                            };
                            scale * d
                        })
                        .collect();
                    self.acc(&mut grads, *prob, gi);
                }
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let shape = self.value(*id).shape().to_vec();
                let t = match param_grads.get_mut(id.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Hash of every discrete choice made during the forward pass: ReLU
    /// on/off states, pooling winners and clamp activity. Two evaluations
    /// with the same pattern lie in the same smooth piece of the function.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = Fnv::new();
        let eps = T::from_f64(PROB_EPS);
        let bound = T::from_f64(kernels::SIGMOID_CLAMP);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|&v| h.bit(v > T::zero())),
                Op::MaxPool2 { argmax, .. } | Op::GlobalMaxPool { argmax, .. } => {
                    argmax.iter().for_each(|&a| h.word(a as u64))
                }
                Op::Sigmoid(input) => self
                    .value(*input)
                    .data()
                    .iter()
                    .for_each(|&v| h.bit(v > -bound && v < bound)),
                Op::Bce { prob, .. } | Op::BernoulliKl { prob, .. } => self
                    .value(*prob)
                    .data()
                    .iter()
                    .for_each(|&v| h.bit(inside_clamp(v, eps))),
                _ => {}
            }
        }
        h.finish()
    }
}

fn check_target<T: Scalar>(op: &'static str, p: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if p.shape() != target.shape() {
        return Err(Error::dim(
            op,
            format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp_prob<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

#[inline]
fn inside_clamp<T: Scalar>(p: T, eps: T) -> bool {
    p > eps && p < T::one() - eps
}

/// One element of the Bernoulli divergence on already clamped inputs.
#[inline]
pub(crate) fn kl_term<T: Scalar>(x: T, p: T, full: bool) -> T {
    let one = T::one();
    let pos = x * (x / p).ln();
    if full {
        pos + (one - x) * ((one - x) / (one - p)).ln()
    } else {
        pos
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn word(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn bit(&mut self, b: bool) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::scalar(3.0)).unwrap();
        let _p = tape
            .param("p", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap())
            .unwrap();
        let loss = tape.scale(w, 2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.get("w").unwrap().data(), &[2.0]);
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["w", "p"]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut tape = Tape::<f32>::new();
        tape.param("a", Tensor::zeros(&[1])).unwrap();
        assert!(tape.param("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn kl_of_identical_maps_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![4], vec![0.0, 0.3, 0.9, 1.0]).unwrap();
        let p = tape.param("p", x.clone()).unwrap();
        let l = tape.bernoulli_kl(p, x, true).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::scalar(0.5));
        let l = tape.bce(p, Tensor::scalar(0.5)).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant(Tensor::scalar(0.0));
        let l = tape.bce(p, Tensor::scalar(1.0)).unwrap();
        assert!((tape.value(l).data()[0] - 16.118_095_650_958_32).abs() < 1e-9);
    }
}
