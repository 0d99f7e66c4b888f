//! Drag jobs shared by the CLI and the HTTP server.

use dragnoise_core::diffusion::Diffusion;
use dragnoise_core::drag::{
    DragEngine, DragInstruction, DragPair, DragParams, DragProgress, DragStatus, LossRecord, Point,
};
use dragnoise_core::metrics::fidelity_mse;
use dragnoise_core::tensor::Tensor;
use dragnoise_core::unet::UNet;
use dragnoise_core::Error;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad points `{input}`: {reason} (expected \"x1,y1:x2,y2;...\")")]
pub struct PointsError {
    pub input: String,
    pub reason: String,
}

/// Parse `"x1,y1:x2,y2;x3,y3:x4,y4"` into anchor/objective pairs. Blank
/// segments (e.g. a trailing `;`) are ignored.
pub fn parse_points(s: &str) -> Result<Vec<DragPair>, PointsError> {
    let fail = |reason: String| PointsError {
        input: s.to_string(),
        reason,
    };
    let point = |p: &str| -> Result<Point, PointsError> {
        let (x, y) = p
            .split_once(',')
            .ok_or_else(|| fail(format!("`{p}` is not x,y")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f32>()
                .ok()
                .filter(|f| f.is_finite())
                .ok_or_else(|| fail(format!("`{v}` is not a number")))
        };
        Ok((num(x)?, num(y)?))
    };
    let mut pairs = Vec::new();
    for seg in s.split(';').map(str::trim).filter(|seg| !seg.is_empty()) {
        let (a, b) = seg
            .split_once(':')
            .ok_or_else(|| fail(format!("`{seg}` has no `:`")))?;
        pairs.push(DragPair {
            a: point(a)?,
            b: point(b)?,
        });
    }
    if pairs.is_empty() {
        return Err(fail("no pairs".into()));
    }
    Ok(pairs)
}

/// Coarse phase of a running job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Inverted,
    Optimizing,
    Denoising,
}

#[derive(Debug, Clone, Serialize)]
pub struct DragReport {
    pub status: DragStatus,
    pub iterations: usize,
    pub md: f64,
    pub fidelity: f64,
    pub anchors: Vec<Point>,
    pub loss_history: Vec<LossRecord>,
    pub trajectory: Vec<Vec<Point>>,
}

/// Capture, optimize, denoise and score. Fidelity is measured outside the
/// instruction's mask, or over the whole image without one.
pub fn run_drag(
    net: &UNet<f32>,
    diffusion: &Diffusion,
    image: &Tensor<f32>,
    instruction: &DragInstruction<f32>,
    params: &DragParams,
    mut on_stage: impl FnMut(Stage),
    mut on_progress: impl FnMut(&DragProgress),
) -> Result<(Tensor<f32>, DragReport), Error> {
    let engine = DragEngine::new(net, diffusion);
    let mut session = engine.capture_state(image, instruction, params)?;
    on_stage(Stage::Inverted);
    on_stage(Stage::Optimizing);
    engine.run_drag_optimization(&mut session, &mut on_progress)?;
    on_stage(Stage::Denoising);
    let edited = engine.propagate_and_denoise(&session)?;
    let md = engine.mean_distance(&edited, &session)?;
    let mask = instruction
        .mask
        .as_ref()
        .map(|m| m.clone().reshape(image.shape().to_vec()))
        .transpose()?;
    let fidelity = fidelity_mse(image, &edited, mask.as_ref())?;
    let report = DragReport {
        status: session.status,
        iterations: session.iterations(),
        md,
        fidelity,
        anchors: session.anchors.clone(),
        loss_history: session.loss_history.clone(),
        trajectory: session.trajectory.clone(),
    };
    Ok((edited, report))
}
