//! Seeded, label-preserving image augmentations and the inverse warps that
//! bring segmentation predictions on an augmented view back into the
//! original frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::DOWNSAMPLE;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;
/// Translation bound as a fraction of the image extent, per axis.
pub const MAX_TRANSLATE_FRAC: f64 = 0.05;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const MAX_BRIGHTNESS: f64 = 0.2;
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);
const MIN_ABS_DET: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugKind {
    Identity,
    Hflip,
    /// Rotation and scale about the image centre, then translation.
    /// `translate_x`/`translate_y` are fractions of width/height.
    Affine {
        rot_deg: f64,
        translate_x: f64,
        translate_y: f64,
        scale: f64,
    },
    /// Brightness offset, then contrast scaling about the image mean.
    ColorJitter {
        brightness: f64,
        contrast: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub seed: u64,
}

/// `p_out = m * p_in + t` in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Affine2 {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine2 {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    fn inverse(&self) -> Affine2 {
        let d = self.det();
        let mi = [
            [self.m[1][1] / d, -self.m[0][1] / d],
            [-self.m[1][0] / d, self.m[0][0] / d],
        ];
        let t = [
            -(mi[0][0] * self.t[0] + mi[0][1] * self.t[1]),
            -(mi[1][0] * self.t[0] + mi[1][1] * self.t[1]),
        ];
        Affine2 { m: mi, t }
    }

    /// The same warp expressed on the 1/8 grid whose cell `u` covers image
    /// pixels `8u .. 8u+7` (centre `8u + 3.5`).
    fn to_seg_grid(self) -> Affine2 {
        let f = DOWNSAMPLE as f64;
        let c = (f - 1.0) / 2.0;
        // u' = (A(f*u + c) - c) / f
        let t = [
            (self.m[0][0] * c + self.m[0][1] * c + self.t[0] - c) / f,
            (self.m[1][0] * c + self.m[1][1] * c + self.t[1] - c) / f,
        ];
        Affine2 { m: self.m, t }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            kind: AugKind::Identity,
            seed: 0,
        }
    }

    pub fn hflip() -> Self {
        AugmentationSpec {
            kind: AugKind::Hflip,
            seed: 0,
        }
    }

    pub fn affine(rot_deg: f64, translate_x: f64, translate_y: f64, scale: f64) -> Result<Self> {
        let spec = AugmentationSpec {
            kind: AugKind::Affine {
                rot_deg,
                translate_x,
                translate_y,
                scale,
            },
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn color_jitter(brightness: f64, contrast: f64) -> Result<Self> {
        let spec = AugmentationSpec {
            kind: AugKind::ColorJitter { brightness, contrast },
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self.kind, AugKind::Hflip | AugKind::Affine { .. })
    }

    /// Checks parameter ranges and invertibility.
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        match self.kind {
            AugKind::Identity | AugKind::Hflip => Ok(()),
            AugKind::Affine {
                rot_deg,
                translate_x,
                translate_y,
                scale,
            } => {
                if !within(rot_deg, -MAX_ROTATION_DEG, MAX_ROTATION_DEG)
                    || !within(translate_x, -MAX_TRANSLATE_FRAC, MAX_TRANSLATE_FRAC)
                    || !within(translate_y, -MAX_TRANSLATE_FRAC, MAX_TRANSLATE_FRAC)
                    || !within(scale, SCALE_RANGE.0, SCALE_RANGE.1)
                {
                    return Err(Error::Config(format!(
                        "affine parameters out of range: {:?}",
                        self.kind
                    )));
                }
                if (scale * scale).abs() < MIN_ABS_DET {
                    return Err(Error::Config("affine warp is not invertible".into()));
                }
                Ok(())
            }
            AugKind::ColorJitter { brightness, contrast } => {
                if !within(brightness, -MAX_BRIGHTNESS, MAX_BRIGHTNESS)
                    || !within(contrast, CONTRAST_RANGE.0, CONTRAST_RANGE.1)
                {
                    return Err(Error::Config(format!("color jitter out of range: {:?}", self.kind)));
                }
                Ok(())
            }
        }
    }

    /// Forward pixel map for an `h x w` image, `None` for identity geometry.
    fn pixel_affine(&self, h: usize, w: usize) -> Option<Affine2> {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        match self.kind {
            AugKind::Identity | AugKind::ColorJitter { .. } => None,
            AugKind::Hflip => Some(Affine2 {
                m: [[-1.0, 0.0], [0.0, 1.0]],
                t: [w as f64 - 1.0, 0.0],
            }),
            AugKind::Affine {
                rot_deg,
                translate_x,
                translate_y,
                scale,
            } => {
                let (s, c) = rot_deg.to_radians().sin_cos();
                let m = [[scale * c, -scale * s], [scale * s, scale * c]];
                let t = [
                    cx + translate_x * w as f64 - (m[0][0] * cx + m[0][1] * cy),
                    cy + translate_y * h as f64 - (m[1][0] * cx + m[1][1] * cy),
                ];
                Some(Affine2 { m, t })
            }
        }
    }
}

/// `count` independent specs, each drawn uniformly from hflip, affine and
/// color jitter.
pub fn sample_augs(count: usize, seed: u64) -> Result<Vec<AugmentationSpec>> {
    if count == 0 {
        return Err(Error::Config("augmentation count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let spec_seed: u64 = rng.gen();
        let kind = match rng.gen_range(0..3) {
            0 => AugKind::Hflip,
            1 => AugKind::Affine {
                rot_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
                translate_x: rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
                translate_y: rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
                scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            },
            _ => AugKind::ColorJitter {
                brightness: rng.gen_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS),
                contrast: rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            },
        };
        let spec = AugmentationSpec { kind, seed: spec_seed };
        if spec.validate().is_ok() {
            out.push(spec);
        }
    }
    Ok(out)
}

fn plane_dims(op: &'static str, t: &Tensor, rank3: bool) -> Result<(usize, usize)> {
    match (t.shape(), rank3) {
        ([1, h, w], true) | ([h, w], false) => Ok((*h, *w)),
        (s, _) => Err(Error::dim(
            op,
            format!("expected {}, got {s:?}", if rank3 { "[1,H,W]" } else { "[h,w]" }),
        )),
    }
}

fn hflip_plane(data: &[f32], w: usize) -> Vec<f32> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Bilinear sample with zero outside the plane.
fn sample_zero(data: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            data[yi as usize * w + xi as usize] as f64
        }
    };
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1) * (1.0 - fx) * fy
        + px(x0 + 1, y0 + 1) * fx * fy
}

/// Bilinear sample with coordinates clamped onto the plane.
fn sample_clamped(data: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = |xi: usize, yi: usize| data[yi * w + xi] as f64;
    v(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + v(x1, y0) * fx * (1.0 - fy)
        + v(x0, y1) * (1.0 - fx) * fy
        + v(x1, y1) * fx * fy
}

/// Resample `data` so that output pixel `p` reads input at `inv(p)`.
fn warp_plane(data: &[f32], h: usize, w: usize, inv: &Affine2) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            out.push(sample_zero(data, h, w, sx, sy) as f32);
        }
    }
    out
}

/// Applies `spec` to an image `[1, H, W]`; output is clamped to `[0, 1]`.
pub fn apply(spec: &AugmentationSpec, image: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims("augment::apply", image, true)?;
    let data = image.data();
    let out = match spec.kind {
        AugKind::Identity => return Ok(image.clone()),
        AugKind::Hflip => hflip_plane(data, w),
        AugKind::Affine { .. } => {
            let fwd = spec.pixel_affine(h, w).expect("affine kind has geometry");
            warp_plane(data, h, w, &fwd.inverse())
        }
        AugKind::ColorJitter { brightness, contrast } => {
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
            data.iter()
                .map(|&v| (contrast * (v as f64 - mean) + mean + brightness) as f32)
                .collect()
        }
    };
    let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![1, h, w], out)
}

/// Warps a segmentation-resolution map the way [`apply`] warps the image.
/// Colour jitter leaves it unchanged.
pub fn warp_seg(spec: &AugmentationSpec, seg: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims("augment::warp_seg", seg, false)?;
    match spec.kind {
        AugKind::Identity | AugKind::ColorJitter { .. } => Ok(seg.clone()),
        AugKind::Hflip => Tensor::new(vec![h, w], hflip_plane(seg.data(), w)),
        AugKind::Affine { .. } => {
            let fwd = spec
                .pixel_affine(h * DOWNSAMPLE, w * DOWNSAMPLE)
                .expect("affine kind has geometry")
                .to_seg_grid();
            Tensor::new(vec![h, w], warp_plane(seg.data(), h, w, &fwd.inverse()))
        }
    }
}

/// Maps a segmentation map predicted on the augmented view back onto the
/// original image grid.
///
/// Returns the realigned map and a validity mask: `false` marks cells whose
/// location falls outside the augmented frame, so no prediction exists for
/// them.
pub fn inverse_warp_seg(spec: &AugmentationSpec, seg: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let (h, w) = plane_dims("augment::inverse_warp_seg", seg, false)?;
    match spec.kind {
        AugKind::Identity | AugKind::ColorJitter { .. } => Ok((seg.clone(), vec![true; h * w])),
        AugKind::Hflip => Ok((Tensor::new(vec![h, w], hflip_plane(seg.data(), w))?, vec![true; h * w])),
        AugKind::Affine { .. } => {
            let fwd = spec
                .pixel_affine(h * DOWNSAMPLE, w * DOWNSAMPLE)
                .expect("affine kind has geometry")
                .to_seg_grid();
            let mut out = Vec::with_capacity(h * w);
            let mut valid = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = fwd.apply(x as f64, y as f64);
                    let inside = u >= -0.5 && u <= w as f64 - 0.5 && v >= -0.5 && v <= h as f64 - 0.5;
                    valid.push(inside);
                    out.push(if inside {
                        sample_clamped(seg.data(), h, w, u, v) as f32
                    } else {
                        0.0
                    });
                }
            }
            Ok((Tensor::new(vec![h, w], out)?, valid))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| ((i * 13) % 29) as f32 / 28.0)
    }

    #[test]
    fn count_zero_rejected() {
        assert!(matches!(sample_augs(0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_sized() {
        let a = sample_augs(4, 99).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, sample_augs(4, 99).unwrap());
        assert_ne!(a, sample_augs(4, 100).unwrap());
    }

    #[test]
    fn sampled_parameters_in_range() {
        for seed in 0..200 {
            let spec = &sample_augs(1, seed).unwrap()[0];
            assert!(spec.validate().is_ok(), "{spec:?}");
            assert!(!matches!(spec.kind, AugKind::Identity));
        }
    }

    #[test]
    fn all_three_kinds_get_sampled() {
        let specs = sample_augs(60, 5).unwrap();
        let count = |f: fn(&AugKind) -> bool| specs.iter().filter(|s| f(&s.kind)).count();
        assert!(count(|k| matches!(k, AugKind::Hflip)) > 5);
        assert!(count(|k| matches!(k, AugKind::Affine { .. })) > 5);
        assert!(count(|k| matches!(k, AugKind::ColorJitter { .. })) > 5);
    }

    #[test]
    fn out_of_range_specs_rejected() {
        assert!(AugmentationSpec::affine(12.0, 0.0, 0.0, 1.0).is_err());
        assert!(AugmentationSpec::affine(0.0, 0.06, 0.0, 1.0).is_err());
        assert!(AugmentationSpec::affine(0.0, 0.0, 0.0, 1.2).is_err());
        assert!(AugmentationSpec::color_jitter(0.3, 1.0).is_err());
        assert!(AugmentationSpec::color_jitter(0.0, 0.5).is_err());
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = ramp(16, 16);
        assert!(apply(&AugmentationSpec::identity(), &img).unwrap().bit_eq(&img));
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = ramp(16, 24);
        let f = AugmentationSpec::hflip();
        let once = apply(&f, &img).unwrap();
        assert!(!once.bit_eq(&img));
        assert!(apply(&f, &once).unwrap().bit_eq(&img));
    }

    #[test]
    fn brightness_clamps_at_one() {
        let img = Tensor::full(&[1, 8, 8], 0.9f32);
        let out = apply(&AugmentationSpec::color_jitter(0.2, 1.0).unwrap(), &img).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_affine_reproduces_image() {
        let img = ramp(16, 16);
        let spec = AugmentationSpec::affine(0.0, 0.0, 0.0, 1.0).unwrap();
        let out = apply(&spec, &img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = ramp(64, 64);
        // 2/64 of the width: two pixels right, zero fill on the left
        let spec = AugmentationSpec::affine(0.0, 2.0 / 64.0, 0.0, 1.0).unwrap();
        let out = apply(&spec, &img).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let got = out.data()[y * 64 + x];
                let want = if x < 2 { 0.0 } else { img.data()[y * 64 + x - 2] };
                assert!((got - want).abs() < 1e-5, "({x},{y}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn hflip_inverse_reverses_columns() {
        let seg = Tensor::from_fn(&[2, 3], |i| i as f32);
        let (back, mask) = inverse_warp_seg(&AugmentationSpec::hflip(), &seg).unwrap();
        assert_eq!(back.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn identity_and_color_inverse_unchanged() {
        let seg = Tensor::from_fn(&[4, 4], |i| i as f32 / 16.0);
        for spec in [
            AugmentationSpec::identity(),
            AugmentationSpec::color_jitter(0.1, 0.9).unwrap(),
        ] {
            let (back, mask) = inverse_warp_seg(&spec, &seg).unwrap();
            assert!(back.bit_eq(&seg));
            assert!(mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn translation_marks_uncovered_border_invalid() {
        let seg = Tensor::full(&[8, 8], 0.5f32);
        // 5% of 64 px = 3.2 px = 0.4 cell: the whole grid stays inside the half-cell margin
        let spec = AugmentationSpec::affine(0.0, 0.05, 0.0, 1.0).unwrap();
        let (_, mask) = inverse_warp_seg(&spec, &seg).unwrap();
        assert!(mask.iter().all(|&m| m));
        // A 10 degree rotation with shrink pushes corners out of frame.
        let spec = AugmentationSpec::affine(10.0, 0.05, 0.05, 1.1).unwrap();
        let (_, mask) = inverse_warp_seg(&spec, &seg).unwrap();
        assert!(mask.iter().any(|&m| !m));
    }
}
