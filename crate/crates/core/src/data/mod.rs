//! Synthetic ring images with known geometry and a geometric radius oracle.

mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use render::{gen_shape_image, ShapeKind, ShapeSpec, MARGIN_PX};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generated images with their ground-truth specs.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub size: usize,
    pub specs: Vec<ShapeSpec>,
    pub images: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack the selected `[1, 1, S, S]` images into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = indices
            .iter()
            .map(|&i| {
                self.images.get(i).cloned().ok_or_else(|| {
                    Error::invalid("dataset", format!("index {i} >= {}", self.len()))
                })
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }
}

/// Random ring parameters for a `size` image; ranges scale with `size / 32`
/// (radius 6..12, thickness 2..4 at 32 px).
pub fn random_ring_spec(rng: &mut impl Rng, size: usize) -> ShapeSpec {
    let scale = size as f32 / 32.0;
    let radius = rng.random_range(6.0 * scale..=12.0 * scale);
    let thickness = rng.random_range(2.0 * scale..=4.0 * scale);
    let lo = radius + MARGIN_PX - 0.5;
    let hi = size as f32 - 0.5 - MARGIN_PX - radius;
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    ShapeSpec::ring((cx, cy), radius, thickness)
}

/// `n` anti-aliased rings, deterministic in `seed`.
pub fn gen_dataset<T: Scalar>(n: usize, seed: u64, size: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::invalid("gen_dataset", "n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<ShapeSpec> = (0..n).map(|_| random_ring_spec(&mut rng, size)).collect();
    let images = specs
        .iter()
        .map(|s| gen_shape_image(s, size, true))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        size,
        specs,
        images,
    })
}

/// Bilinear read of a single-channel `[.., H, W]` image; -1 outside.
fn sample_image<T: Scalar>(img: &[T], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            -1.0
        } else {
            img[yi as usize * w + xi as usize].as_f64()
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    at(xi, yi) * (1.0 - fx) * (1.0 - fy)
        + at(xi + 1, yi) * fx * (1.0 - fy)
        + at(xi, yi + 1) * (1.0 - fx) * fy
        + at(xi + 1, yi + 1) * fx * fy
}

fn image_plane<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, &[T])> {
    let s = image.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::shape(
            "estimate_ring",
            "[1, 1, H, W] or [H, W]",
            format!("{s:?}"),
        ));
    }
    Ok((s[s.len() - 2], s[s.len() - 1], image.data()))
}

/// Center and outer radius recovered from pixels alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingEstimate {
    pub center: (f64, f64),
    pub radius: f64,
}

const PROFILE_STEP: f64 = 0.25;
const PROFILE_ANGLES: usize = 96;

/// Center from the intensity centroid; radius from the mean radial profile
/// scanned at 0.25 px, taken as the half-intensity crossing outward of the
/// profile peak (the outer edge for rings and disks alike).
pub fn estimate_ring<T: Scalar>(image: &Tensor<T>) -> Result<RingEstimate> {
    let (h, w, px) = image_plane(image)?;
    let max = px
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max < -0.5 {
        return Err(Error::NoShapeDetected);
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, v) in px.iter().enumerate() {
        let wgt = ((v.as_f64() + 1.0) / 2.0).max(0.0);
        sw += wgt;
        sx += wgt * (i % w) as f64;
        sy += wgt * (i / w) as f64;
    }
    let (cx, cy) = (sx / sw, sy / sw);

    let r_max = (h.max(w) as f64) / 2.0;
    let profile: Vec<f64> = (0..=(r_max / PROFILE_STEP) as usize)
        .map(|k| {
            let r = k as f64 * PROFILE_STEP;
            let total: f64 = (0..PROFILE_ANGLES)
                .map(|a| {
                    let th = a as f64 * std::f64::consts::TAU / PROFILE_ANGLES as f64;
                    sample_image(px, h, w, cx + r * th.cos(), cy + r * th.sin())
                })
                .sum();
            total / PROFILE_ANGLES as f64
        })
        .collect();
    let peak = profile
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > profile[best] { i } else { best });
    let floor = profile[peak..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let level = 0.5 * (profile[peak] + floor);
    let mut radius = (profile.len() - 1) as f64 * PROFILE_STEP;
    for k in peak..profile.len() - 1 {
        if profile[k] >= level && profile[k + 1] < level {
            let frac = (profile[k] - level) / (profile[k] - profile[k + 1]);
            radius = (k as f64 + frac) * PROFILE_STEP;
            break;
        }
    }
    Ok(RingEstimate {
        center: (cx, cy),
        radius,
    })
}

pub fn estimate_ring_radius<T: Scalar>(image: &Tensor<T>) -> Result<f64> {
    estimate_ring(image).map(|e| e.radius)
}
