//! Synthetic two-modality head phantoms with known tissue labels.
//!
//! A perturbed ellipsoid is split into nested layers by its normalized
//! radius: white matter in the core, gray matter around it, a thin CSF film
//! outside, background beyond. A few small CSF inclusions sit inside the
//! white matter. Each modality paints the same label field from its own
//! contrast table, then partial-volume blur, a smooth multiplicative bias
//! field and Gaussian noise are applied before rescaling to `[0, 1]`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{LabelMap, Volume};
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;

/// Class → intensity for one modality, indexed by class id.
pub type Contrast = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Small CSF ellipsoids placed inside the white matter.
    pub inclusions: usize,
    /// Relative amplitude of the low-frequency boundary perturbation.
    pub wobble: f64,
    /// Gaussian partial-volume blur, in voxels.
    pub smoothing: f64,
    pub t1: Contrast,
    pub t2: Contrast,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            seed: 0,
            inclusions: 2,
            wobble: 0.05,
            smoothing: 0.8,
            // CSF dark on T1, bright on T2
            t1: [0.0, 0.25, 0.55, 0.80],
            t2: [0.0, 0.90, 0.60, 0.40],
            noise_sigma: 0.03,
            bias_amplitude: 0.1,
        }
    }
}

/// Layer boundaries on the perturbed normalized radius.
const WM_EDGE: f64 = 0.62;
const GM_EDGE: f64 = 0.82;
const CSF_EDGE: f64 = 0.93;

/// Sum of a few random plane waves with integer wave numbers in `1..=2`,
/// normalized to peak amplitude ≤ 1.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut impl Rng, count: usize) -> Self {
        let waves = (0..count)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(0..=2) as f64);
                let phase = rng.random_range(0.0..TAU);
                let amp = rng.random_range(0.5..1.0);
                (k, phase, amp)
            })
            .collect::<Vec<_>>();
        Self { waves }
    }

    /// `u` are coordinates scaled to `[0, 1)`.
    fn at(&self, u: [f64; 3]) -> f64 {
        let total: f64 = self.waves.iter().map(|(_, _, a)| a).sum();
        self.waves
            .iter()
            .map(|(k, ph, a)| a * (TAU * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + ph).sin())
            .sum::<f64>()
            / total.max(1e-12)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Returns `(t1, t2, labels)` sharing one label geometry.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume, LabelMap)> {
    if spec.dims.iter().any(|&d| d < 32 || d % 8 != 0) {
        return Err(Error::invalid(
            "generate_phantom",
            format!("dims {:?} must each be ≥ 32 and divisible by 8", spec.dims),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let fd = spec.dims.map(|x| x as f64);

    let head = Ellipsoid {
        center: fd.map(|x| x * (0.5 + rng.random_range(-0.03..0.03))),
        axes: fd.map(|x| x * rng.random_range(0.44..0.48)),
    };
    let wobble = SmoothField::new(&mut rng, 6);
    let inclusions: Vec<Ellipsoid> = (0..spec.inclusions)
        .map(|_| {
            let center = [0, 1, 2].map(|i| {
                head.center[i] + head.axes[i] * WM_EDGE * rng.random_range(-0.45..0.45)
            });
            let axes = fd.map(|x| x * rng.random_range(0.05..0.09));
            Ellipsoid { center, axes }
        })
        .collect();

    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let u = [p[0] / fd[0], p[1] / fd[1], p[2] / fd[2]];
                let r = head.radius(p) * (1.0 + spec.wobble * wobble.at(u));
                let class = if r < WM_EDGE {
                    if inclusions.iter().any(|e| e.radius(p) < 1.0) {
                        CSF
                    } else {
                        WM
                    }
                } else if r < GM_EDGE {
                    GM
                } else if r < CSF_EDGE {
                    CSF
                } else {
                    BACKGROUND
                };
                labels.push(class);
            }
        }
    }

    let t1 = paint(&labels, spec, &spec.t1, &mut rng)?;
    let t2 = paint(&labels, spec, &spec.t2, &mut rng)?;
    Ok((t1, t2, LabelMap::new(spec.dims, labels)?))
}

fn paint(labels: &[u8], spec: &PhantomSpec, contrast: &Contrast, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let [d, h, w] = spec.dims;
    let mut img: Vec<f64> = labels.iter().map(|&c| contrast[c as usize]).collect();
    gaussian_blur(&mut img, spec.dims, spec.smoothing);
    let bias = SmoothField::new(rng, 4);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::invalid("generate_phantom", e.to_string()))?;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = [z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64];
                img[i] = img[i] * (1.0 + spec.bias_amplitude * bias.at(u)) + noise.sample(rng);
                i += 1;
            }
        }
    }
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    let voxels = img
        .iter()
        .map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0))
        .collect();
    Volume::new(spec.dims, 1, voxels)
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(img: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| img[base + i * stride]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, &wt) in taps.iter().enumerate() {
                        let j = (i as isize + t as isize - radius).clamp(0, n as isize - 1) as usize;
                        acc += wt * line[j];
                    }
                    img[base + i * stride] = acc;
                }
            }
        }
    }
}
