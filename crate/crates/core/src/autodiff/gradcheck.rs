//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward kernels it checks.

use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Probe at most this many coordinates per input (evenly strided).
    pub max_coords: usize,
}

impl GradCheckConfig {
    pub fn f64_default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: 64,
        }
    }

    pub fn f32_default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-2,
            max_coords: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of `build` w.r.t. `inputs` (marked in
/// `differentiable`) against central differences.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    differentiable: &[bool],
    cfg: GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(false);
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item()?.as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(v, &d)| tape.leaf(v.clone(), d))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = grads.get(var).expect("differentiable input has a gradient");
        let n = inputs[i].numel();
        let stride = n.div_ceil(cfg.max_coords).max(1);
        for j in (0..n).step_by(stride) {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + T::lit(cfg.step);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - T::lit(cfg.step);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = rel_err(analytic.data()[j].as_f64(), numeric, cfg.floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
