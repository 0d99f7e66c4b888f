//! Seeded ring-shrinking benchmark: anchors on the outer edge of a ring are
//! dragged radially inward and the result is scored geometrically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{estimate_ring_radius, gen_shape_image, ShapeSpec};
use crate::drag::{DragEngine, DragInstruction, DragPair, DragParams, DragStatus, Point};
use crate::error::{Error, Result};
use crate::metrics::fidelity_mse;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub drag_px: f32,
    /// Anchors spaced evenly around the ring, the first pointing along +x.
    pub anchors: usize,
    pub radius_range: (f32, f32),
    /// Distance between the ring's outer edge and the image border.
    pub edge_margin: f32,
    /// Pass the ring bounding box as the edit mask.
    pub use_mask: bool,
    /// Padding of the bounding box around the ring.
    pub mask_pad: f32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            drag_px: 4.0,
            anchors: 4,
            radius_range: (8.0, 12.0),
            edge_margin: 2.5,
            use_mask: true,
            mask_pad: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchCase<T: Scalar> {
    pub id: u64,
    pub spec: ShapeSpec,
    pub image: Tensor<T>,
    pub instruction: DragInstruction<T>,
    /// Ring bounding box, 1 inside; fidelity is scored outside it.
    pub mask: Tensor<T>,
    pub target_radius: f32,
}

impl<T: Scalar> BenchCase<T> {
    pub fn generate(id: u64, size: usize, cfg: &BenchConfig) -> Result<Self> {
        let (r_lo, r_hi) = cfg.radius_range;
        if !(cfg.drag_px > 0.0 && r_lo <= r_hi && r_lo > cfg.drag_px && cfg.anchors >= 1) {
            return Err(Error::invalid("bench_case", format!("bad config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0xbe9c_4a11);
        let radius = rng.random_range(r_lo..=r_hi);
        let thickness = rng.random_range(2.0f32..=4.0);
        let lo = radius + cfg.edge_margin;
        let hi = (size - 1) as f32 - cfg.edge_margin - radius;
        if lo > hi {
            return Err(Error::invalid(
                "bench_case",
                format!("radius {radius} does not fit a {size}px image"),
            ));
        }
        let center = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let spec = ShapeSpec::ring(center, radius, thickness);
        let image = gen_shape_image(&spec, size, true)?;

        let target_radius = radius - cfg.drag_px;
        let on_circle = |r: f32, k: usize| -> Point {
            let angle = std::f32::consts::TAU * k as f32 / cfg.anchors as f32;
            (center.0 + r * angle.cos(), center.1 + r * angle.sin())
        };
        let pairs = (0..cfg.anchors)
            .map(|k| DragPair {
                a: on_circle(radius, k),
                b: on_circle(target_radius, k),
            })
            .collect();

        let reach = radius + cfg.mask_pad;
        let mask = Tensor::from_fn([size, size], |i| {
            let (x, y) = ((i % size) as f32, (i / size) as f32);
            if (x - center.0).abs() <= reach && (y - center.1).abs() <= reach {
                T::one()
            } else {
                T::zero()
            }
        });
        let mut instruction = DragInstruction::new(pairs);
        if cfg.use_mask {
            instruction = instruction.with_mask(mask.clone());
        }
        Ok(Self {
            id,
            spec,
            image,
            instruction,
            mask,
            target_radius,
        })
    }
}

/// One benchmark line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub case_id: u64,
    pub propagate: bool,
    pub md: f64,
    pub fidelity: f64,
    pub converged: bool,
    pub iterations: usize,
    pub status: DragStatus,
    pub radius_before: f64,
    pub radius_after: f64,
    pub target_radius: f64,
}

impl BenchRecord {
    /// How far the estimated radius moved toward the target, in pixels.
    pub fn radius_progress(&self) -> f64 {
        let dir = (self.target_radius - self.radius_before).signum();
        (self.radius_after - self.radius_before) * dir
    }
}

/// Run one case; returns the record and the edited image.
pub fn run_case<T: Scalar>(
    engine: &DragEngine<'_, T>,
    case: &BenchCase<T>,
    params: &DragParams,
) -> Result<(BenchRecord, Tensor<T>)> {
    let (edited, session) = engine.edit(&case.image, &case.instruction, params, |_| {})?;
    let md = engine.mean_distance(&edited, &session)?;
    let fidelity = fidelity_mse(&case.image, &edited, Some(&case.mask))?;
    let radius_before = estimate_ring_radius(&case.image)?;
    // A collapsed edit counts as no progress rather than aborting the run.
    let radius_after = estimate_ring_radius(&edited).unwrap_or(radius_before);
    let record = BenchRecord {
        case_id: case.id,
        propagate: params.propagate,
        md,
        fidelity,
        converged: session.status == DragStatus::Converged,
        iterations: session.iterations(),
        status: session.status,
        radius_before,
        radius_after,
        target_radius: case.target_radius as f64,
    };
    Ok((record, edited))
}
