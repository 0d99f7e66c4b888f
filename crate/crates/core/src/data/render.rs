use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minimum distance between a shape and the image border, in pixels.
pub const MARGIN_PX: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ring,
    Disk,
}

/// A single bright shape on a dark background. Pixel `(x, y)` covers the
/// square `[x - 0.5, x + 0.5] x [y - 0.5, y + 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f32, f32),
    /// Outer radius.
    pub radius: f32,
    /// Ring width; ignored for disks.
    pub thickness: f32,
    /// Peak value in `[-1, 1]`.
    pub intensity: f32,
}

impl ShapeSpec {
    pub fn ring(center: (f32, f32), radius: f32, thickness: f32) -> Self {
        Self {
            kind: ShapeKind::Ring,
            center,
            radius,
            thickness,
            intensity: 1.0,
        }
    }

    pub fn disk(center: (f32, f32), radius: f32) -> Self {
        Self {
            kind: ShapeKind::Disk,
            center,
            radius,
            thickness: 0.0,
            intensity: 1.0,
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("shape_spec", msg));
        if !(self.radius > 0.0) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if self.kind == ShapeKind::Ring && !(self.thickness > 0.0 && self.thickness <= self.radius)
        {
            return bad(format!(
                "ring needs 0 < thickness <= radius, got {}",
                self.thickness
            ));
        }
        if !(-1.0..=1.0).contains(&self.intensity) {
            return bad(format!("intensity {} outside [-1, 1]", self.intensity));
        }
        let lo = -0.5 + MARGIN_PX + self.radius;
        let hi = size as f32 - 0.5 - MARGIN_PX - self.radius;
        let (cx, cy) = self.center;
        if !(lo <= cx && cx <= hi && lo <= cy && cy <= hi) {
            return bad(format!(
                "shape at ({cx}, {cy}) radius {} violates the {MARGIN_PX} px margin of a {size}px image",
                self.radius
            ));
        }
        Ok(())
    }

    pub fn inner_radius(&self) -> f32 {
        match self.kind {
            ShapeKind::Ring => self.radius - self.thickness,
            ShapeKind::Disk => 0.0,
        }
    }

    /// Exact shape area in square pixels.
    pub fn area(&self) -> f64 {
        let r = self.radius as f64;
        let ri = self.inner_radius() as f64;
        std::f64::consts::PI * (r * r - ri * ri)
    }
}

/// Antiderivative of `sqrt(r^2 - x^2)`.
fn half_chord_integral(x: f64, r: f64) -> f64 {
    let x = x.clamp(-r, r);
    0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
}

/// Area of `{x0 <= X <= x1, 0 <= Y <= y, X^2 + Y^2 <= r^2}` for `y >= 0`.
fn strip_area(x0: f64, x1: f64, y: f64, r: f64) -> f64 {
    let (a, b) = (x0.max(-r), x1.min(r));
    if a >= b || y <= 0.0 {
        return 0.0;
    }
    let c = (r * r - y * y).max(0.0).sqrt();
    let mut area = 0.0;
    // |X| <= c: the disk extends past y, the strip is capped at height y.
    let (ma, mb) = (a.max(-c), b.min(c));
    if ma < mb {
        area += y * (mb - ma);
    }
    for (lo, hi) in [(a, b.min(-c)), (a.max(c), b)] {
        if lo < hi {
            area += half_chord_integral(hi, r) - half_chord_integral(lo, r);
        }
    }
    area
}

/// Exact area of a centered disk of radius `r` inside the rectangle.
pub(crate) fn disk_rect_area(x0: f64, x1: f64, y0: f64, y1: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let signed = |y: f64| y.signum() * strip_area(x0, x1, y.abs(), r);
    (signed(y1) - signed(y0)).max(0.0)
}

/// Render `spec` as a `[1, 1, size, size]` image in `[-1, 1]`, background -1.
///
/// With `antialias` every pixel takes its exact coverage fraction; without,
/// a pixel is lit when its center lies inside the shape.
pub fn gen_shape_image<T: Scalar>(
    spec: &ShapeSpec,
    size: usize,
    antialias: bool,
) -> Result<Tensor<T>> {
    spec.validate(size)?;
    let (cx, cy) = (spec.center.0 as f64, spec.center.1 as f64);
    let r_out = spec.radius as f64;
    let r_in = spec.inner_radius() as f64;
    let peak = spec.intensity as f64 + 1.0;
    Ok(Tensor::from_fn([1, 1, size, size], |i| {
        let (px, py) = ((i % size) as f64 - cx, (i / size) as f64 - cy);
        let coverage = if antialias {
            let (x0, x1, y0, y1) = (px - 0.5, px + 0.5, py - 0.5, py + 0.5);
            disk_rect_area(x0, x1, y0, y1, r_out) - disk_rect_area(x0, x1, y0, y1, r_in)
        } else {
            let d2 = px * px + py * py;
            f64::from(d2 <= r_out * r_out && d2 >= r_in * r_in)
        };
        T::lit(-1.0 + coverage.clamp(0.0, 1.0) * peak)
    }))
}
