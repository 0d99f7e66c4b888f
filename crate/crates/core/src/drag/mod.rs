//! Point-based drag editing by optimizing one U-Net feature at a single
//! denoising step, then reusing the optimized feature in later steps.
//!
//! Flow for one edit:
//!
//! 1. [`DragEngine::capture_state`] inverts the image to `t_edit`, runs one
//!    forward pass there, and caches every tap.
//! 2. [`DragEngine::run_drag_optimization`] updates `s_hat` (the optimized
//!    tap) with Adam. Each iteration evaluates only the blocks after the
//!    optimized tap; encoder activations come from the cache.
//! 3. [`DragEngine::propagate_and_denoise`] denoises to `k = 0`, injecting
//!    `s_hat` into each step of the editing stage.

mod loss;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use loss::{
    alignment_loss, downsample_mask, grid_feature, mask_loss, mask_weight, nearest_feature,
    normalized_direction, round_point, sample_feature, track_anchors, Point,
};

use crate::autodiff::{Adam, OpKind, Tape, Var};
use crate::diffusion::Diffusion;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{Activations, FeatureTap, ParamBinding, Source, TapState, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragPair {
    pub a: Point,
    pub b: Point,
}

/// Anchor/objective pairs plus an optional editable-region mask
/// (`[H, W]`, 1 = editable).
#[derive(Debug, Clone)]
pub struct DragInstruction<T: Scalar> {
    pub pairs: Vec<DragPair>,
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> DragInstruction<T> {
    pub fn new(pairs: Vec<DragPair>) -> Self {
        Self { pairs, mask: None }
    }

    pub fn with_mask(mut self, mask: Tensor<T>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid(
                "drag_instruction",
                "at least one point pair is required",
            ));
        }
        let max = (size - 1) as f32;
        for pair in &self.pairs {
            for p in [pair.a, pair.b] {
                if !(p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= max && p.1 <= max) {
                    return Err(Error::OutOfBounds {
                        op: "drag_instruction",
                        x: p.0 as f64,
                        y: p.1 as f64,
                        width: size,
                        height: size,
                    });
                }
            }
            normalized_direction(pair.a, pair.b)?;
        }
        if let Some(m) = &self.mask {
            let ok_shape =
                matches!(*m.shape(), [h, w] | [1, h, w] | [1, 1, h, w] if h == size && w == size);
            if !ok_shape {
                return Err(Error::shape(
                    "drag_instruction mask",
                    format!("[{size}, {size}]"),
                    format!("{:?}", m.shape()),
                ));
            }
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::invalid(
                    "drag_instruction",
                    "mask values must be 0 or 1",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DragParams {
    /// DDIM index where the feature is optimized.
    pub t_edit: usize,
    /// Steps `k <= t_refine` run without the override.
    pub t_refine: usize,
    pub r1: usize,
    pub r2: usize,
    pub lambda: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub stop_dist_px: f64,
    pub supervision_tap: FeatureTap,
    pub optimized_tap: FeatureTap,
    /// Inject `s_hat` into every editing-stage step (otherwise only at `t_edit`).
    pub propagate: bool,
}

impl Default for DragParams {
    fn default() -> Self {
        Self {
            t_edit: 35,
            t_refine: 10,
            r1: 1,
            r2: 3,
            lambda: 0.1,
            lr: 0.01,
            max_steps: 80,
            stop_dist_px: 1.0,
            supervision_tap: FeatureTap::DECODER_BLOCK_3,
            optimized_tap: FeatureTap::Bottleneck,
            propagate: true,
        }
    }
}

impl DragParams {
    pub fn validate(&self, k_max: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("drag_params", msg));
        if !(self.t_refine < self.t_edit && self.t_edit <= k_max) {
            return bad(format!(
                "need 0 <= t_refine < t_edit <= {k_max}, got t_refine={} t_edit={}",
                self.t_refine, self.t_edit
            ));
        }
        if self.r2 < 1 {
            return bad("r2 must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.stop_dist_px >= 0.0) {
            return bad(format!(
                "stop_dist_px {} must be non-negative",
                self.stop_dist_px
            ));
        }
        if self.supervision_tap < self.optimized_tap {
            return bad(format!(
                "supervision tap {} runs before optimized tap {}",
                self.supervision_tap, self.optimized_tap
            ));
        }
        Ok(())
    }

    /// DDIM steps whose forward pass receives `s_hat`.
    pub fn override_steps(&self) -> Vec<usize> {
        if self.propagate {
            (self.t_refine + 1..=self.t_edit).rev().collect()
        } else {
            vec![self.t_edit]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DragStatus {
    Running,
    Converged,
    MaxSteps,
    Failed,
}

impl DragStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DragStatus::Running => "running",
            DragStatus::Converged => "converged",
            DragStatus::MaxSteps => "max-steps",
            DragStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub alignment: f64,
    /// Unweighted masked L1 drift; 0 without a mask.
    pub mask: f64,
}

/// Snapshot published after each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragProgress {
    pub iteration: usize,
    pub alignment: f64,
    pub mask: f64,
    pub anchors: Vec<Point>,
    pub trajectory_len: usize,
    pub status: DragStatus,
}

/// What a per-iteration backward tape contained.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeSummary {
    pub op_count: usize,
    pub op_kinds: Vec<OpKind>,
    /// Named leaves (model parameters) that entered the tape.
    pub param_leaves: Vec<String>,
    /// Named leaves that received a gradient.
    pub trainable_leaves: Vec<String>,
}

impl TapeSummary {
    pub fn of<T: Scalar>(tape: &Tape<T>) -> Self {
        let leaves = tape.leaves();
        Self {
            op_count: tape.op_count(),
            op_kinds: tape.op_kinds(),
            param_leaves: leaves.iter().filter_map(|l| l.name.clone()).collect(),
            trainable_leaves: leaves
                .iter()
                .filter(|l| l.requires_grad)
                .filter_map(|l| l.name.clone())
                .collect(),
        }
    }
}

/// A forward pass from `s_hat` to the supervision tap, kept for the next
/// iteration's loss.
struct PendingForward<T: Scalar> {
    tape: Tape<T>,
    s_hat: Var,
    feature: Var,
}

/// State of one edit.
pub struct EditSession<T: Scalar> {
    pub params: DragParams,
    pub pairs: Vec<DragPair>,
    /// Inverted state at `t_edit`.
    pub z_t: Tensor<T>,
    /// Every tap of the forward pass at `t_edit`.
    pub cache: Activations<T>,
    pub s_t: Tensor<T>,
    pub s_hat: Tensor<T>,
    /// Supervision features at the initial anchors; never refreshed.
    pub f0: Vec<Vec<T>>,
    pub anchors: Vec<Point>,
    pub loss_history: Vec<LossRecord>,
    pub trajectory: Vec<Vec<Point>>,
    pub status: DragStatus,
    pub last_tape: Option<TapeSummary>,
    mask_weight: Option<Tensor<T>>,
    adam: Adam<T>,
    pending: Option<PendingForward<T>>,
}

impl<T: Scalar> EditSession<T> {
    pub fn iterations(&self) -> usize {
        self.loss_history.len()
    }

    pub fn objectives(&self) -> Vec<Point> {
        self.pairs.iter().map(|p| p.b).collect()
    }

    /// Largest L2 distance between an anchor and its objective.
    pub fn max_distance(&self) -> f64 {
        self.anchors
            .iter()
            .zip(&self.pairs)
            .map(|(a, p)| ((a.0 - p.b.0) as f64).hypot((a.1 - p.b.1) as f64))
            .fold(0.0, f64::max)
    }

    pub fn progress(&self) -> DragProgress {
        let last = self.loss_history.last();
        DragProgress {
            iteration: self.iterations(),
            alignment: last.map_or(0.0, |l| l.alignment),
            mask: last.map_or(0.0, |l| l.mask),
            anchors: self.anchors.clone(),
            trajectory_len: self.trajectory.len(),
            status: self.status,
        }
    }
}

/// Read-only view of a model and schedule that runs edits.
pub struct DragEngine<'a, T: Scalar> {
    pub net: &'a UNet<T>,
    pub diffusion: &'a Diffusion,
}

impl<'a, T: Scalar> DragEngine<'a, T> {
    pub fn new(net: &'a UNet<T>, diffusion: &'a Diffusion) -> Self {
        Self { net, diffusion }
    }

    fn image_size(&self) -> usize {
        self.net.config.image_size
    }

    /// Distance from the map border an anchor must keep so its `r1`
    /// neighbourhood, shifted by a unit vector, stays inside.
    fn anchor_margin(params: &DragParams) -> usize {
        params.r1 + 1
    }

    fn check_image(&self, x0: &Tensor<T>) -> Result<()> {
        let s = self.image_size();
        let want = [1, self.net.config.in_channels, s, s];
        if x0.shape() != want {
            return Err(Error::shape(
                "drag image",
                format!("{want:?}"),
                format!("{:?}", x0.shape()),
            ));
        }
        if !x0.all_finite() {
            return Err(Error::NonFinite { op: "drag image" });
        }
        Ok(())
    }

    pub fn capture_state(
        &self,
        x0: &Tensor<T>,
        instruction: &DragInstruction<T>,
        params: &DragParams,
    ) -> Result<EditSession<T>> {
        self.check_image(x0)?;
        params.validate(self.diffusion.k())?;
        let size = self.image_size();
        instruction.validate(size)?;
        let cfg = &self.net.config;
        for tap in [params.supervision_tap, params.optimized_tap] {
            if !cfg.contains(tap) {
                return Err(Error::invalid(
                    "drag_params",
                    format!("{tap} does not exist in this model"),
                ));
            }
        }
        let sup_shape = cfg.tap_shape(params.supervision_tap, 1);
        if sup_shape[2] != size || sup_shape[3] != size {
            return Err(Error::invalid(
                "drag_params",
                format!(
                    "supervision tap {} must run at image resolution",
                    params.supervision_tap
                ),
            ));
        }

        let z_t = self.diffusion.invert(self.net, x0, params.t_edit)?;
        let mut taps = TapState::new().capture_all(cfg);
        self.net.forward(
            &z_t,
            self.diffusion.ddim.timestep(params.t_edit)?,
            &mut taps,
        )?;
        let cache = taps.captured;
        let s_t = cache[&params.optimized_tap].clone();

        let margin = Self::anchor_margin(params) as f32;
        let hi = (size - 1) as f32 - margin;
        let anchors: Vec<Point> = instruction
            .pairs
            .iter()
            .map(|p| (p.a.0.clamp(margin, hi), p.a.1.clamp(margin, hi)))
            .collect();
        let sup = &cache[&params.supervision_tap];
        let f0 = anchors
            .iter()
            .map(|&a| sample_feature(sup, a))
            .collect::<Result<Vec<_>>>()?;

        let mask_weight = match &instruction.mask {
            Some(m) => {
                let (h, w) = (s_t.shape()[2], s_t.shape()[3]);
                let down = downsample_mask(m, (h, w))?;
                Some(mask_weight(&down, s_t.shape(), 1.0)?)
            }
            None => None,
        };

        Ok(EditSession {
            params: params.clone(),
            pairs: instruction.pairs.clone(),
            z_t,
            s_hat: s_t.clone(),
            s_t,
            cache,
            f0,
            trajectory: vec![anchors.clone()],
            anchors,
            loss_history: Vec::new(),
            status: DragStatus::Running,
            last_tape: None,
            mask_weight,
            adam: Adam::new(T::lit(params.lr)),
            pending: None,
        })
    }

    /// Decoder-side pass from `s_hat` to the supervision tap on a fresh tape.
    fn forward_from(&self, session: &EditSession<T>) -> Result<PendingForward<T>> {
        let p = &session.params;
        let mut tape = Tape::new();
        let s_hat = tape.leaf(session.s_hat.clone(), true);
        let mut binding = ParamBinding::frozen();
        let source = Source::Resume {
            tap: p.optimized_tap,
            value: s_hat,
            cache: &session.cache,
        };
        let t = self.diffusion.ddim.timestep(p.t_edit)?;
        let out = self.net.forward_on_tape(
            &mut tape,
            &mut binding,
            source,
            &[t],
            &BTreeMap::new(),
            Some(p.supervision_tap),
        )?;
        let feature = out.blocks[&p.supervision_tap];
        Ok(PendingForward {
            tape,
            s_hat,
            feature,
        })
    }

    /// One Adam update of `s_hat`, then the forward pass for the next
    /// iteration, whose supervision map also drives this iteration's tracking.
    pub fn optimize_iteration(&self, session: &mut EditSession<T>) -> Result<()> {
        if session.status != DragStatus::Running {
            return Err(Error::invalid(
                "optimize_iteration",
                format!("session is {}", session.status.as_str()),
            ));
        }
        let result = self.optimize_iteration_inner(session);
        if result.is_err() {
            session.status = DragStatus::Failed;
            session.pending = None;
        }
        result
    }

    fn optimize_iteration_inner(&self, session: &mut EditSession<T>) -> Result<()> {
        let p = session.params.clone();
        let PendingForward {
            mut tape,
            s_hat,
            feature,
        } = match session.pending.take() {
            Some(f) => f,
            None => self.forward_from(session)?,
        };

        let mut anchors = Vec::new();
        let mut dirs = Vec::new();
        for (a, pair) in session.anchors.iter().zip(&session.pairs) {
            // An anchor sitting exactly on its objective has no direction.
            if let Ok(v) = normalized_direction(*a, pair.b) {
                anchors.push(*a);
                dirs.push(v);
            }
        }
        let align = if anchors.is_empty() {
            tape.constant(Tensor::scalar(T::zero()))
        } else {
            alignment_loss(&mut tape, feature, &anchors, &dirs, p.r1)?
        };
        let (total, mask_value) = match &session.mask_weight {
            Some(w) => {
                let m = mask_loss(&mut tape, &session.s_t, s_hat, w)?;
                let weighted = tape.scale(m, T::lit(p.lambda))?;
                let total = tape.add(align, weighted)?;
                (total, tape.value(m).item()?.as_f64())
            }
            None => (align, 0.0),
        };
        let align_value = tape.value(align).item()?.as_f64();
        let total_value = tape.value(total).item()?.as_f64();
        if !total_value.is_finite() {
            return Err(Error::NonFinite { op: "drag loss" });
        }
        let grads = tape.backward(total)?;
        session.last_tape = Some(TapeSummary::of(&tape));
        let g = grads.get(s_hat).ok_or(Error::MissingGradient(0))?;
        session.adam.step(&mut [&mut session.s_hat], &[Some(g)])?;
        drop(tape);

        let next = self.forward_from(session)?;
        let margin = Self::anchor_margin(&p);
        session.anchors = track_anchors(
            next.tape.value(next.feature),
            &session.anchors,
            &session.f0,
            p.r2,
            margin,
        )?;
        session.pending = Some(next);
        let iteration = session.loss_history.len() + 1;
        session.loss_history.push(LossRecord {
            iteration,
            alignment: align_value,
            mask: mask_value,
        });
        session.trajectory.push(session.anchors.clone());
        Ok(())
    }

    /// Iterate until every anchor is within `stop_dist_px` of its objective
    /// or `max_steps` iterations ran.
    pub fn run_drag_optimization(
        &self,
        session: &mut EditSession<T>,
        mut on_progress: impl FnMut(&DragProgress),
    ) -> Result<DragStatus> {
        loop {
            if session.max_distance() <= session.params.stop_dist_px {
                session.status = DragStatus::Converged;
            } else if session.iterations() >= session.params.max_steps {
                session.status = DragStatus::MaxSteps;
            }
            if session.status != DragStatus::Running {
                session.pending = None;
                on_progress(&session.progress());
                return Ok(session.status);
            }
            self.optimize_iteration(session)?;
            on_progress(&session.progress());
        }
    }

    /// Denoise `z_t` to `k = 0`, injecting `s_hat` at the override steps;
    /// result clamped to `[-1, 1]`.
    pub fn propagate_and_denoise(&self, session: &EditSession<T>) -> Result<Tensor<T>> {
        let p = &session.params;
        let mut taps: BTreeMap<usize, TapState<T>> = p
            .override_steps()
            .into_iter()
            .map(|k| {
                (
                    k,
                    TapState::new().with_override(p.optimized_tap, session.s_hat.clone()),
                )
            })
            .collect();
        let x = self
            .diffusion
            .sample(self.net, &session.z_t, p.t_edit, 0, &mut taps)?;
        Ok(x.map(|v| v.max(-T::one()).min(T::one())))
    }

    /// Plain DDIM reconstruction from `z_t` (no overrides), clamped.
    pub fn reconstruct(&self, session: &EditSession<T>) -> Result<Tensor<T>> {
        let x = self.diffusion.sample(
            self.net,
            &session.z_t,
            session.params.t_edit,
            0,
            &mut BTreeMap::new(),
        )?;
        Ok(x.map(|v| v.max(-T::one()).min(T::one())))
    }

    /// Capture, optimize and denoise in one call.
    pub fn edit(
        &self,
        x0: &Tensor<T>,
        instruction: &DragInstruction<T>,
        params: &DragParams,
        on_progress: impl FnMut(&DragProgress),
    ) -> Result<(Tensor<T>, EditSession<T>)> {
        let mut session = self.capture_state(x0, instruction, params)?;
        self.run_drag_optimization(&mut session, on_progress)?;
        let image = self.propagate_and_denoise(&session)?;
        Ok((image, session))
    }

    /// Mean L2 distance between each objective and where the edited image's
    /// supervision map best matches the anchor's initial feature (full-map
    /// search).
    pub fn mean_distance(&self, edited: &Tensor<T>, session: &EditSession<T>) -> Result<f64> {
        self.check_image(edited)?;
        let p = &session.params;
        let z = self.diffusion.invert(self.net, edited, p.t_edit)?;
        let mut taps = TapState::new().capture(p.supervision_tap);
        self.net
            .forward(&z, self.diffusion.ddim.timestep(p.t_edit)?, &mut taps)?;
        let sup = &taps.captured[&p.supervision_tap];
        let mut total = 0.0;
        for (f0, pair) in session.f0.iter().zip(&session.pairs) {
            let found = nearest_feature(sup, f0)?;
            total += ((found.0 - pair.b.0) as f64).hypot((found.1 - pair.b.1) as f64);
        }
        Ok(total / session.pairs.len() as f64)
    }
}
