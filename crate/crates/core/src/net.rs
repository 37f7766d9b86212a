//! The two-stage defect network.
//!
//! Stage one segments: three blocks of `conv3x3-relu-conv3x3-relu-maxpool2`
//! (8, 16, 32 channels) followed by a 1x1 head giving a one-channel logit map
//! at 1/8 input resolution. Stage two classifies: the 32-channel features and
//! the segmentation logits are concatenated, passed through a 3x3 conv to 8
//! channels and a ReLU, then global max and average pooling of those 8
//! channels plus global max and average of the segmentation logits (18
//! values) feed a single linear unit.
//!
//! Gradients flow freely between the stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Padding, Scalar, Tape, Tensor};

/// Segmentation output stride.
pub const DOWNSAMPLE: usize = 8;
pub const SEG_CHANNELS: [usize; 3] = [8, 16, 32];
pub const CLS_CHANNELS: usize = 8;
/// Subtracted from every input pixel before the first convolution.
pub const INPUT_CENTRE: f64 = 0.5;
/// Inputs to the final linear unit.
pub const CLS_FEATURES: usize = 2 * CLS_CHANNELS + 2;

const ARCH_TAG: &str = "sdd-two-stage/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_h: usize,
    pub input_w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl Architecture {
    pub fn new(input_h: usize, input_w: usize) -> Result<Self> {
        if input_h == 0 || input_w == 0 || !input_h.is_multiple_of(DOWNSAMPLE) || !input_w.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "input size {input_h}x{input_w} must be positive multiples of {DOWNSAMPLE}"
            )));
        }
        Ok(Architecture { input_h, input_w })
    }

    pub fn seg_size(&self) -> (usize, usize) {
        (self.input_h / DOWNSAMPLE, self.input_w / DOWNSAMPLE)
    }

    /// Parameters in their fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::with_capacity(18);
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: cin * k * k,
                is_bias: false,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: cin * k * k,
                is_bias: true,
            });
        };
        let mut cin = 1;
        for (b, &c) in SEG_CHANNELS.iter().enumerate() {
            conv(format!("seg.block{}.conv1", b + 1), c, cin, 3);
            conv(format!("seg.block{}.conv2", b + 1), c, c, 3);
            cin = c;
        }
        conv("seg.head".into(), 1, cin, 1);
        conv("cls.conv".into(), CLS_CHANNELS, cin + 1, 3);
        specs.push(ParamSpec {
            name: "cls.fc.weight".into(),
            shape: vec![1, CLS_FEATURES],
            fan_in: CLS_FEATURES,
            is_bias: false,
        });
        specs.push(ParamSpec {
            name: "cls.fc.bias".into(),
            shape: vec![1],
            fan_in: CLS_FEATURES,
            is_bias: true,
        });
        specs
    }

    /// SHA-256 over the tag, input size and every parameter name and shape.
    pub fn fingerprint(&self) -> String {
        let mut desc = format!("{ARCH_TAG};in={}x{}", self.input_h, self.input_w);
        for s in self.param_specs() {
            desc.push_str(&format!(";{}={:?}", s.name, s.shape));
        }
        let digest = Sha256::digest(desc.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named network weights in architecture order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    arch: Architecture,
    fingerprint: String,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// Checks names and shapes against the architecture.
    pub fn from_entries(arch: Architecture, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let specs = arch.param_specs();
        if specs.len() != entries.len() {
            return Err(Error::Contract(format!(
                "architecture has {} parameters, got {}",
                specs.len(),
                entries.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(&entries) {
            if s.name != *name || s.shape != t.shape() {
                return Err(Error::Contract(format!(
                    "expected {}{:?}, got {}{:?}",
                    s.name,
                    s.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            fingerprint: arch.fingerprint(),
            arch,
            entries,
        })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let entries = arch
            .param_specs()
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        ModelParams {
            fingerprint: arch.fingerprint(),
            arch,
            entries,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            fingerprint: self.fingerprint.clone(),
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Bitwise equality of every tensor and the fingerprint.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn check_fingerprint(&self) -> Result<()> {
        let expected = self.arch.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::ArchitectureMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// He-uniform weights in `±sqrt(6/fan_in)`, zero biases.
pub fn build_architecture(input_h: usize, input_w: usize, seed: u64) -> Result<ModelParams<f32>> {
    let arch = Architecture::new(input_h, input_w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = arch
        .param_specs()
        .into_iter()
        .map(|s| {
            let t = if s.is_bias {
                Tensor::zeros(&s.shape)
            } else {
                let bound = (6.0 / s.fan_in as f64).sqrt();
                Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..bound) as f32)
            };
            (s.name, t)
        })
        .collect();
    ModelParams::from_entries(arch, entries)
}

/// Network output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    /// `[h, w]` at 1/8 input resolution.
    pub seg_prob: Tensor<T>,
    pub cls_prob: T,
    pub seg_logit: Tensor<T>,
    pub cls_logit: T,
}

/// A forward pass kept on its tape for a later backward.
#[derive(Debug)]
pub struct TapedForward<T: Scalar = f32> {
    pub tape: Tape<T>,
    pub prediction: Prediction<T>,
    /// `[1, 1, h, w]`
    pub seg_prob: NodeId,
    /// `[1, 1]`
    pub cls_prob: NodeId,
    pub seg_logit: NodeId,
    pub cls_logit: NodeId,
}

fn check_image<T: Scalar>(arch: &Architecture, image: &Tensor<T>) -> Result<()> {
    if image.shape() != [1, arch.input_h, arch.input_w] {
        return Err(Error::Contract(format!(
            "image shape {:?} does not match architecture input [1, {}, {}]",
            image.shape(),
            arch.input_h,
            arch.input_w
        )));
    }
    Ok(())
}

/// Runs the network on `image` (`[1, H, W]`, values in `[0, 1]`) and keeps
/// the tape.
pub fn forward_recorded<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<TapedForward<T>> {
    params.check_fingerprint()?;
    let arch = params.arch;
    check_image(&arch, image)?;
    let mut tape = Tape::new();
    let centre = T::from_f64(INPUT_CENTRE);
    let x = tape.constant(image.map(|v| v - centre).reshape(&[1, 1, arch.input_h, arch.input_w])?);
    let p = params
        .entries
        .iter()
        .map(|(n, t)| tape.param(n.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;

    let mut h = x;
    for b in 0..SEG_CHANNELS.len() {
        let q = 4 * b;
        h = tape.conv2d(h, p[q], p[q + 1], Padding::Same)?;
        h = tape.relu(h);
        h = tape.conv2d(h, p[q + 2], p[q + 3], Padding::Same)?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
    }
    let seg_logit = tape.conv2d(h, p[12], p[13], Padding::Same)?;

    let cat = tape.concat_channels(&[h, seg_logit])?;
    let c = tape.conv2d(cat, p[14], p[15], Padding::Same)?;
    let c = tape.relu(c);
    let c_max = tape.global_max_pool(c)?;
    let c_avg = tape.global_avg_pool(c)?;
    let s_max = tape.global_max_pool(seg_logit)?;
    let s_avg = tape.global_avg_pool(seg_logit)?;
    let feat = tape.concat_channels(&[c_max, c_avg, s_max, s_avg])?;
    let cls_logit = tape.linear(feat, p[16], p[17])?;

    let seg_prob = tape.sigmoid(seg_logit);
    let cls_prob = tape.sigmoid(cls_logit);

    let (sh, sw) = arch.seg_size();
    let prediction = Prediction {
        seg_prob: tape.value(seg_prob).clone().reshape(&[sh, sw])?,
        cls_prob: tape.value(cls_prob).data()[0],
        seg_logit: tape.value(seg_logit).clone().reshape(&[sh, sw])?,
        cls_logit: tape.value(cls_logit).data()[0],
    };
    Ok(TapedForward {
        tape,
        prediction,
        seg_prob,
        cls_prob,
        seg_logit,
        cls_logit,
    })
}

/// Inference-only forward pass.
pub fn forward<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Prediction<T>> {
    forward_recorded(params, image).map(|f| f.prediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = build_architecture(64, 64, 7).unwrap();
        let b = build_architecture(64, 64, 7).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = build_architecture(64, 64, 1).unwrap();
        let b = build_architecture(64, 64, 2).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn rejects_non_multiple_of_eight() {
        assert!(matches!(build_architecture(60, 64, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_within_he_bound_and_zero_bias() {
        let p = build_architecture(32, 32, 3).unwrap();
        for (spec, (_, t)) in p.arch().param_specs().iter().zip(p.entries()) {
            if spec.is_bias {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let b = (6.0 / spec.fan_in as f32).sqrt();
                assert!(t.data().iter().all(|&v| v.abs() <= b));
            }
        }
    }

    #[test]
    fn seg_map_is_one_eighth() {
        let p = build_architecture(64, 64, 0).unwrap();
        let img = Tensor::full(&[1, 64, 64], 0.5f32);
        let pred = forward(&p, &img).unwrap();
        assert_eq!(pred.seg_prob.shape(), &[8, 8]);
        let p = build_architecture(64, 128, 0).unwrap();
        let img = Tensor::full(&[1, 64, 128], 0.5f32);
        assert_eq!(forward(&p, &img).unwrap().seg_prob.shape(), &[8, 16]);
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let p = ModelParams::<f32>::zeros(Architecture::new(32, 32).unwrap());
        let img = Tensor::from_fn(&[1, 32, 32], |i| (i % 7) as f32 / 7.0);
        let pred = forward(&p, &img).unwrap();
        assert!(pred.seg_prob.data().iter().all(|&v| v == 0.5));
        assert_eq!(pred.cls_prob, 0.5);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = build_architecture(32, 32, 11).unwrap();
        let img = Tensor::from_fn(&[1, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
        let a = forward(&p, &img).unwrap();
        let b = forward(&p, &img).unwrap();
        assert_eq!(a.cls_prob.to_bits(), b.cls_prob.to_bits());
        assert!(a.seg_prob.bit_eq(&b.seg_prob));
    }

    #[test]
    fn wrong_image_shape_is_contract_error() {
        let p = build_architecture(32, 32, 0).unwrap();
        let img = Tensor::full(&[1, 64, 64], 0.5f32);
        assert!(matches!(forward(&p, &img), Err(Error::Contract(_))));
    }

    #[test]
    fn fingerprint_depends_on_input_size() {
        let a = Architecture::new(64, 64).unwrap().fingerprint();
        let b = Architecture::new(128, 128).unwrap().fingerprint();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }
}
