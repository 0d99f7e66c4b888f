use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel coordinates `(x, y)` = (column, row).
pub type Point = (f32, f32);

/// Unit vector from `a` to `b`.
pub fn normalized_direction(a: Point, b: Point) -> Result<Point> {
    let (dx, dy) = ((b.0 - a.0) as f64, (b.1 - a.1) as f64);
    let len = dx.hypot(dy);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::DegenerateDrag);
    }
    Ok(((dx / len) as f32, (dy / len) as f32))
}

/// Integer grid point nearest to `a`.
pub fn round_point(a: Point) -> (i64, i64) {
    (a.0.round() as i64, a.1.round() as i64)
}

fn feature_dims<T: Scalar>(f: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(
            op,
            "[C, H, W] or [1, C, H, W]",
            format!("{s:?}"),
        )),
    }
}

/// Feature vector `[C]` at an integer grid point.
pub fn grid_feature<T: Scalar>(f: &Tensor<T>, x: usize, y: usize) -> Result<Vec<T>> {
    let (c, h, w) = feature_dims(f, "grid_feature")?;
    if x >= w || y >= h {
        return Err(Error::OutOfBounds {
            op: "grid_feature",
            x: x as f64,
            y: y as f64,
            width: w,
            height: h,
        });
    }
    Ok((0..c).map(|ch| f.data()[(ch * h + y) * w + x]).collect())
}

/// Sum over pairs and over `p` in the `(2 r1 + 1)^2` grid square around
/// `round(a_i)` of `|F[p] - F(p + v_i)|_1`, with `F[p]` read as a constant and
/// `F(p + v_i)` bilinearly sampled on the tape.
pub fn alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    anchors: &[Point],
    directions: &[Point],
    r1: usize,
) -> Result<Var> {
    if anchors.len() != directions.len() {
        return Err(Error::shape(
            "alignment_loss",
            anchors.len(),
            directions.len(),
        ));
    }
    let (c, h, w) = feature_dims(tape.value(f), "alignment_loss")?;
    let r = r1 as i64;
    let mut fixed = Vec::new();
    let mut moved = Vec::new();
    for (&a, &v) in anchors.iter().zip(directions) {
        let (ax, ay) = round_point(a);
        for py in ay - r..=ay + r {
            for px in ax - r..=ax + r {
                let (qx, qy) = (px as f64 + v.0 as f64, py as f64 + v.1 as f64);
                let inside = |x: f64, y: f64| {
                    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
                };
                if !inside(px as f64, py as f64) || !inside(qx, qy) {
                    return Err(Error::OutOfBounds {
                        op: "alignment_loss",
                        x: if inside(px as f64, py as f64) {
                            qx
                        } else {
                            px as f64
                        },
                        y: if inside(px as f64, py as f64) {
                            qy
                        } else {
                            py as f64
                        },
                        width: w,
                        height: h,
                    });
                }
                fixed.extend(grid_feature(tape.value(f), px as usize, py as usize)?);
                moved.push((T::lit(qx), T::lit(qy)));
            }
        }
    }
    let target = tape.constant(Tensor::new([moved.len(), c], fixed)?);
    let sampled = tape.bilinear_sample_points(f, &moved)?;
    tape.l1(sampled, target, None)
}

/// `sum(weight * |s_hat - s_t|)` with `s_t` constant. `weight` is
/// `lambda * (1 - M)` broadcast to the feature shape, see [`mask_weight`].
pub fn mask_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s_t: &Tensor<T>,
    s_hat: Var,
    weight: &Tensor<T>,
) -> Result<Var> {
    let target = tape.constant(s_t.clone());
    tape.l1(s_hat, target, Some(weight))
}

/// Binary mask `[H, W]` (1 = editable) reduced to `(h, w)` by area average,
/// then thresholded at 0.5.
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (hh, ww) = match *mask.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
        ref s => return Err(Error::shape("downsample_mask", "[H, W]", format!("{s:?}"))),
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 || hh % th != 0 || ww % tw != 0 {
        return Err(Error::invalid(
            "downsample_mask",
            format!("{hh}x{ww} is not divisible into {th}x{tw}"),
        ));
    }
    let (fy, fx) = (hh / th, ww / tw);
    let m = mask.data();
    Ok(Tensor::from_fn([th, tw], |i| {
        let (ty, tx) = (i / tw, i % tw);
        let mut s = 0.0;
        for y in ty * fy..(ty + 1) * fy {
            for x in tx * fx..(tx + 1) * fx {
                s += m[y * ww + x].as_f64();
            }
        }
        if s / (fx * fy) as f64 >= 0.5 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `lambda * (1 - M_down)` broadcast over channels of a `[1, C, h, w]` feature.
pub fn mask_weight<T: Scalar>(
    mask_down: &Tensor<T>,
    feature_shape: &[usize],
    lambda: f64,
) -> Result<Tensor<T>> {
    let (h, w) = match *feature_shape {
        [1, _, h, w] | [_, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "mask_weight",
                "[1, C, h, w]",
                format!("{s:?}"),
            ))
        }
    };
    if mask_down.shape() != [h, w] {
        return Err(Error::shape(
            "mask_weight",
            format!("[{h}, {w}]"),
            format!("{:?}", mask_down.shape()),
        ));
    }
    let lam = T::lit(lambda);
    let plane = mask_down.data();
    Ok(Tensor::from_fn(feature_shape.to_vec(), |i| {
        lam * (T::one() - plane[i % (h * w)])
    }))
}

/// Move each anchor to the grid point within Chebyshev distance `r2` of
/// `round(a_i)` whose feature is L1-closest to `f0[i]`. The window is clipped
/// to `[margin, size - 1 - margin]`; ties go to the first point in row-major
/// order.
pub fn track_anchors<T: Scalar>(
    f: &Tensor<T>,
    anchors: &[Point],
    f0: &[Vec<T>],
    r2: usize,
    margin: usize,
) -> Result<Vec<Point>> {
    let (c, h, w) = feature_dims(f, "track_anchors")?;
    if anchors.len() != f0.len() {
        return Err(Error::shape("track_anchors", anchors.len(), f0.len()));
    }
    if 2 * margin >= h.min(w) {
        return Err(Error::invalid(
            "track_anchors",
            format!("margin {margin} leaves no room in {h}x{w}"),
        ));
    }
    let data = f.data();
    let r = r2 as i64;
    let (lo_x, hi_x) = (margin as i64, (w - 1 - margin) as i64);
    let (lo_y, hi_y) = (margin as i64, (h - 1 - margin) as i64);
    anchors
        .iter()
        .zip(f0)
        .map(|(&a, target)| {
            if target.len() != c {
                return Err(Error::shape("track_anchors", c, target.len()));
            }
            let (ax, ay) = round_point(a);
            let mut best: Option<(T, i64, i64)> = None;
            for y in (ay - r).max(lo_y)..=(ay + r).min(hi_y) {
                for x in (ax - r).max(lo_x)..=(ax + r).min(hi_x) {
                    let (xu, yu) = (x as usize, y as usize);
                    let d: T = (0..c)
                        .map(|ch| (data[(ch * h + yu) * w + xu] - target[ch]).abs())
                        .sum();
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, x, y));
                    }
                }
            }
            let (_, x, y) = best.ok_or_else(|| {
                Error::invalid(
                    "track_anchors",
                    format!("anchor ({}, {}) has an empty search window", a.0, a.1),
                )
            })?;
            Ok((x as f32, y as f32))
        })
        .collect()
}

/// Grid point of the whole map whose feature is L1-closest to `target`
/// (row-major tie-break).
pub fn nearest_feature<T: Scalar>(f: &Tensor<T>, target: &[T]) -> Result<Point> {
    let (c, h, w) = feature_dims(f, "nearest_feature")?;
    if target.len() != c {
        return Err(Error::shape("nearest_feature", c, target.len()));
    }
    let data = f.data();
    let mut best = (T::infinity(), 0, 0);
    for y in 0..h {
        for x in 0..w {
            let d: T = (0..c)
                .map(|ch| (data[(ch * h + y) * w + x] - target[ch]).abs())
                .sum();
            if d < best.0 {
                best = (d, x, y);
            }
        }
    }
    Ok((best.1 as f32, best.2 as f32))
}

/// Bilinear feature `[C]` at a real position (no tape).
pub fn sample_feature<T: Scalar>(f: &Tensor<T>, p: Point) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let s = tape.bilinear_sample(v, T::lit(p.0 as f64), T::lit(p.1 as f64))?;
    Ok(tape.value(s).data().to_vec())
}
