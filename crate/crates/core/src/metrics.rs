//! Edit-quality metrics.

use crate::drag::{DragEngine, EditSession};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared difference over pixels where `mask == 0`; whole image when
/// `mask` is `None`. An empty region (mask all ones) scores 0.
pub fn fidelity_mse<T: Scalar>(
    original: &Tensor<T>,
    edited: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<f64> {
    if original.shape() != edited.shape() {
        return Err(Error::shape(
            "fidelity_mse",
            format!("{:?}", original.shape()),
            format!("{:?}", edited.shape()),
        ));
    }
    let keep: Box<dyn Fn(usize) -> bool> = match mask {
        Some(m) => {
            if m.numel() != original.numel() {
                return Err(Error::shape(
                    "fidelity_mse mask",
                    original.numel(),
                    m.numel(),
                ));
            }
            let m = m.data();
            Box::new(move |i| m[i] == T::zero())
        }
        None => Box::new(|_| true),
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (a, b)) in original.data().iter().zip(edited.data()).enumerate() {
        if keep(i) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// See [`DragEngine::mean_distance`].
pub fn mean_distance<T: Scalar>(
    engine: &DragEngine<'_, T>,
    edited: &Tensor<T>,
    session: &EditSession<T>,
) -> Result<f64> {
    engine.mean_distance(edited, session)
}
