//! Procedural texture domains with composited defects.
//!
//! A [`DomainSpec`] fixes a texture family and a set of defect classes;
//! [`generate_dataset`] renders labelled samples from it, and
//! [`make_shift_benchmark`] builds the source domains and a shifted target
//! stream used by the experiments.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::DOWNSAMPLE;
use crate::tensor::Tensor;

/// Minimum absolute intensity change for a pixel to count as defective.
pub const MIN_DEFECT_CONTRAST: f64 = 0.15;
const MIN_DEFECT_PIXELS: usize = 4;
const MAX_PLACEMENT_TRIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Texture {
    /// `frequency` is in cycles across the image width.
    Stripes {
        angle_deg: f64,
        frequency: f64,
    },
    Checker {
        cell: usize,
    },
    /// Bilinearly interpolated value noise on a lattice of `scale` pixels.
    SmoothNoise {
        scale: usize,
    },
    Gradient {
        direction_deg: f64,
    },
}

impl Texture {
    pub fn family(&self) -> &'static str {
        match self {
            Texture::Stripes { .. } => "stripes",
            Texture::Checker { .. } => "checker",
            Texture::SmoothNoise { .. } => "smooth_noise",
            Texture::Gradient { .. } => "gradient",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    EllipseBlob,
    ScratchLine,
    GaussianDent,
    SpeckleCluster,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::EllipseBlob,
        DefectClass::ScratchLine,
        DefectClass::GaussianDent,
        DefectClass::SpeckleCluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::EllipseBlob => "ellipse_blob",
            DefectClass::ScratchLine => "scratch_line",
            DefectClass::GaussianDent => "gaussian_dent",
            DefectClass::SpeckleCluster => "speckle_cluster",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub texture: Texture,
    pub defect_classes: Vec<DefectClass>,
    pub defect_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.defect_rate > 0.0 && self.defect_rate < 1.0) {
            return Err(Error::Config(format!(
                "domain {}: defect_rate must lie in (0, 1), got {}",
                self.name, self.defect_rate
            )));
        }
        if self.defect_classes.is_empty() {
            return Err(Error::Config(format!(
                "domain {}: defect_rate > 0 needs at least one defect class",
                self.name
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("domain {}: noise_sigma must be >= 0", self.name)));
        }
        match self.texture {
            Texture::Checker { cell: 0 } | Texture::SmoothNoise { scale: 0 } => Err(Error::Config(format!(
                "domain {}: texture size must be positive",
                self.name
            ))),
            Texture::Stripes { frequency, .. } if !(frequency > 0.0) => Err(Error::Config(format!(
                "domain {}: stripe frequency must be positive",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor,
    /// `[H, W]` with values in `{0, 1}`.
    pub mask: Option<Tensor>,
    pub label: Option<bool>,
    pub domain: String,
    pub class: Option<DefectClass>,
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLE) || !w.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be positive multiples of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// Number of positives for `n` samples at `rate`, rounded up.
pub fn positive_count(n: usize, rate: f64) -> usize {
    // the small slack keeps products like 0.3 * 300 from rounding up to 91
    ((n as f64 * rate - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Renders `n` samples. Exactly [`positive_count`] of them are defective;
/// defect classes are assigned round-robin over positives and the layout is
/// shuffled with the domain seed.
pub fn generate_dataset(spec: &DomainSpec, n: usize, h: usize, w: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    check_dims(h, w)?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let n_pos = positive_count(n, spec.defect_rate);
    let mut layout: Vec<Option<DefectClass>> = (0..n)
        .map(|i| (i < n_pos).then(|| spec.defect_classes[i % spec.defect_classes.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    layout.shuffle(&mut rng);

    layout
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            render_sample(spec, i, class, h, w, &mut rng)
        })
        .collect()
}

fn render_sample(
    spec: &DomainSpec,
    index: usize,
    class: Option<DefectClass>,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let clean = render_texture(&spec.texture, h, w, rng);
    let (mut pixels, mask) = match class {
        None => (clean, vec![0.0f32; h * w]),
        Some(c) => composite_defect(&clean, c, h, w, rng)?,
    };
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
        for v in pixels.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let image: Vec<f32> = pixels
        .iter()
        // same arithmetic as the PGM decoder, so files round-trip bit-exactly
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
        .collect();
    Ok(Sample {
        id: format!("{}-{index:05}", spec.name),
        image: Tensor::new(vec![1, h, w], image)?,
        mask: Some(Tensor::new(vec![h, w], mask)?),
        label: Some(class.is_some()),
        domain: spec.name.clone(),
        class,
    })
}

fn render_texture(texture: &Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    match *texture {
        Texture::Stripes { angle_deg, frequency } => {
            let theta = (angle_deg + rng.gen_range(-5.0..5.0)).to_radians();
            let phase = rng.gen_range(0.0..2.0 * PI);
            let k = 2.0 * PI * frequency / w as f64;
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                    out.push(0.5 + 0.2 * (k * u + phase).sin());
                }
            }
        }
        Texture::Checker { cell } => {
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            let lo = rng.gen_range(0.3..0.4);
            let hi = rng.gen_range(0.6..0.7);
            for y in 0..h {
                for x in 0..w {
                    let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
                    out.push(if parity == 0 { lo } else { hi });
                }
            }
        }
        Texture::SmoothNoise { scale } => {
            let (gh, gw) = (h / scale + 2, w / scale + 2);
            let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.3..0.7)).collect();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / scale as f64, x as f64 / scale as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (smoothstep(fy - y0 as f64), smoothstep(fx - x0 as f64));
                    let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                    out.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Texture::Gradient { direction_deg } => {
            let theta = (direction_deg + rng.gen_range(-10.0..10.0)).to_radians();
            let (c, s) = (theta.cos(), theta.sin());
            let proj = |x: f64, y: f64| x * c + y * s;
            let corners = [
                proj(0.0, 0.0),
                proj(w as f64 - 1.0, 0.0),
                proj(0.0, h as f64 - 1.0),
                proj(w as f64 - 1.0, h as f64 - 1.0),
            ];
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (a, b) = (rng.gen_range(0.25..0.35), rng.gen_range(0.65..0.75));
            for y in 0..h {
                for x in 0..w {
                    let t = (proj(x as f64, y as f64) - lo) / (hi - lo).max(1e-9);
                    out.push(a + (b - a) * t);
                }
            }
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Defect support profile in `[0, 1]` before blurring.
fn defect_profile(class: DefectClass, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let margin = 10.0f64.min(h.min(w) as f64 / 4.0);
    let cx = rng.gen_range(margin..w as f64 - margin);
    let cy = rng.gen_range(margin..h as f64 - margin);
    let mut prof = vec![0.0; h * w];
    let mut paint = |f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..h {
            for x in 0..w {
                prof[y * w + x] = f(x as f64, y as f64);
            }
        }
    };
    match class {
        DefectClass::EllipseBlob => {
            let (a, b) = (rng.gen_range(3.0..7.0), rng.gen_range(2.0..4.5));
            let th: f64 = rng.gen_range(0.0..PI);
            let (c, s) = (th.cos(), th.sin());
            paint(&|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            });
        }
        DefectClass::ScratchLine => {
            let len = rng.gen_range(12.0..24.0);
            let th: f64 = rng.gen_range(0.0..PI);
            let (dx, dy) = (th.cos() * len / 2.0, th.sin() * len / 2.0);
            let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
            paint(&|x, y| {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let t = (((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                let d = ((x - x0 - t * vx).powi(2) + (y - y0 - t * vy).powi(2)).sqrt();
                if d <= 0.9 {
                    1.0
                } else {
                    0.0
                }
            });
        }
        DefectClass::GaussianDent => {
            let sigma = rng.gen_range(2.5..4.5);
            paint(&|x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp());
        }
        DefectClass::SpeckleCluster => {
            let dots: Vec<(f64, f64)> = (0..rng.gen_range(6..12))
                .map(|_| {
                    let r = rng.gen_range(0.0..7.0);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    (cx + r * phi.cos(), cy + r * phi.sin())
                })
                .collect();
            paint(&|x, y| {
                if dots.iter().any(|&(px, py)| (x - px).powi(2) + (y - py).powi(2) <= 1.3) {
                    1.0
                } else {
                    0.0
                }
            });
        }
    }
    prof
}

/// 3x3 box blur with edge replication.
fn blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[yy * w + xx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

fn composite_defect(
    clean: &[f64],
    class: DefectClass,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f32>)> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let prof = blur3(&defect_profile(class, h, w, rng), h, w);
        let amp = rng.gen_range(0.3..0.45);
        let support: Vec<usize> = (0..h * w).filter(|&i| prof[i] > 0.0).collect();
        // push away from the local texture mean so clamping cannot eat the defect
        let local_mean = support.iter().map(|&i| clean[i]).sum::<f64>() / support.len().max(1) as f64;
        let sign = if local_mean > 0.5 { -1.0 } else { 1.0 };
        let out: Vec<f64> = clean
            .iter()
            .zip(&prof)
            .map(|(&c, &p)| (c + sign * amp * p).clamp(0.0, 1.0))
            .collect();
        let mask: Vec<f32> = out
            .iter()
            .zip(clean)
            .map(|(&d, &c)| if (d - c).abs() >= MIN_DEFECT_CONTRAST { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().filter(|&&m| m > 0.0).count() >= MIN_DEFECT_PIXELS {
            return Ok((out, mask));
        }
    }
    Err(Error::Numeric(format!(
        "could not place a visible {} defect on a {h}x{w} image",
        class.name()
    )))
}

/// Sizes for [`make_shift_benchmark_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub source_samples: usize,
    pub target_samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            source_samples: 200,
            target_samples: 300,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShiftBenchmark {
    pub source: Vec<DomainSpec>,
    pub target: DomainSpec,
    /// Labelled source samples, `source_samples` per source domain.
    pub source_data: Vec<Sample>,
    pub target_stream: Vec<Sample>,
}

/// Source and target domain specs for `seed`.
pub fn shift_domains(seed: u64) -> (Vec<DomainSpec>, DomainSpec) {
    let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let seen = vec![DefectClass::EllipseBlob, DefectClass::ScratchLine];
    let source = vec![
        DomainSpec {
            name: "src-stripes".into(),
            texture: Texture::Stripes {
                angle_deg: 0.0,
                frequency: 6.0,
            },
            defect_classes: seen.clone(),
            defect_rate: 0.3,
            noise_sigma: 0.02,
            seed: sub(1),
        },
        DomainSpec {
            name: "src-checker".into(),
            texture: Texture::Checker { cell: 8 },
            defect_classes: seen,
            defect_rate: 0.3,
            noise_sigma: 0.02,
            seed: sub(2),
        },
    ];
    let target = DomainSpec {
        name: "tgt-noise".into(),
        texture: Texture::SmoothNoise { scale: 8 },
        defect_classes: vec![DefectClass::EllipseBlob, DefectClass::SpeckleCluster],
        defect_rate: 0.3,
        noise_sigma: 0.04,
        seed: sub(3),
    };
    (source, target)
}

/// The default benchmark: two source domains and a target stream whose
/// texture, and half of whose defects, never occur in the source.
pub fn make_shift_benchmark(seed: u64) -> Result<ShiftBenchmark> {
    make_shift_benchmark_with(&BenchmarkConfig::default(), seed)
}

pub fn make_shift_benchmark_with(cfg: &BenchmarkConfig, seed: u64) -> Result<ShiftBenchmark> {
    let (source, target) = shift_domains(seed);
    let mut source_data = Vec::new();
    for spec in &source {
        source_data.extend(generate_dataset(spec, cfg.source_samples, cfg.height, cfg.width)?);
    }
    // generate_dataset already shuffles the layout with the target seed
    let target_stream = generate_dataset(&target, cfg.target_samples, cfg.height, cfg.width)?;
    Ok(ShiftBenchmark {
        source,
        target,
        source_data,
        target_stream,
    })
}
