use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded differentiable operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    GroupNorm,
    Silu,
    Add,
    Sub,
    Mul,
    Scale,
    AddChannelBias,
    ConcatChannels,
    DownsampleAvg2,
    UpsampleNearest2,
    Linear,
    BilinearSample,
    Sum,
    Mean,
    Abs,
    Square,
    Mse,
    L1,
    Reshape,
}

enum Op<T> {
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ConcatChannels(Var, Var),
    DownsampleAvg2(Var),
    UpsampleNearest2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BilinearSample {
        f: Var,
        points: Vec<(T, T)>,
    },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Mse(Var, Var),
    L1 {
        a: Var,
        b: Var,
        weight: Option<Vec<T>>,
    },
    Reshape(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Silu(_) => OpKind::Silu,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::DownsampleAvg2(_) => OpKind::DownsampleAvg2,
            Op::UpsampleNearest2(_) => OpKind::UpsampleNearest2,
            Op::Linear { .. } => OpKind::Linear,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Mse(..) => OpKind::Mse,
            Op::L1 { .. } => OpKind::L1,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
    name: Option<String>,
}

/// A leaf (input) entry on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafInfo {
    pub var: Var,
    pub name: Option<String>,
    pub requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// An operation is recorded only when at least one input requires a
/// gradient; otherwise its result is stored as a constant. Detached values
/// are constants and never receive gradient.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Non-finite outputs are reported as errors in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.insert(value, requires_grad, None, None)
    }

    pub fn named_leaf(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> Var {
        self.insert(value, requires_grad, None, Some(name.into()))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded differentiable operations.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    /// Recorded operations in record order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_ref().map(Op::kind))
            .collect()
    }

    pub fn leaves(&self) -> Vec<LeafInfo> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.is_none())
            .map(|(i, n)| LeafInfo {
                var: Var(i),
                name: n.name.clone(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    fn insert(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Option<Op<T>>,
        name: Option<String>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then_some(op);
        Ok(self.insert(value, requires_grad, op, None))
    }

    /// Value-identical constant excluded from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias [{}]", geom.o),
                    format!("{:?}", self.value(b).shape()),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new([geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv2d", value, &inputs, Op::Conv2d { x, w, b, geom })
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "group_norm",
                    format!("{what} [{c}]"),
                    format!("{:?}", self.value(v).shape()),
                ));
            }
        }
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            (n, c, h * w),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new([n, c, h, w], out)?;
        self.record(
            "group_norm",
            value,
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.record("silu", value, &[x], Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.record("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.record("sub", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.record("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.record("scale", value, &[x], Op::Scale(x, factor))
    }

    /// `x[n, c, :, :] + bias[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(bias).shape() != [n, c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias [{n}, {c}]"),
                format!("{:?}", self.value(bias).shape()),
            ));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = b[plane];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.record(
            "add_channel_bias",
            value,
            &[x, bias],
            Op::AddChannelBias { x, bias },
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("N, H, W = {n}, {h}, {w}"),
                format!("{nb}, {hb}, {wb}"),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        self.record("concat_channels", value, &[a, b], Op::ConcatChannels(a, b))
    }

    pub fn downsample_avg2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "downsample_avg2",
                "even H and W",
                format!("{h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = s[2 * i * w + 2 * j] + s[2 * i * w + 2 * j + 1];
                    let b = s[(2 * i + 1) * w + 2 * j] + s[(2 * i + 1) * w + 2 * j + 1];
                    d[i * wo + j] = (a + b) * quarter;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record("downsample_avg2", value, &[x], Op::DownsampleAvg2(x))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    d[i * wo + j] = s[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record("upsample_nearest2", value, &[x], Op::UpsampleNearest2(x))
    }

    /// `x [N, in] . w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = match *self.value(x).shape() {
            [n, fin] => (n, fin),
            ref s => return Err(Error::shape("linear", "input [N, in]", format!("{s:?}"))),
        };
        let fout = match *self.value(w).shape() {
            [fout, wi] if wi == fin => fout,
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight [out, {fin}]"),
                    format!("{s:?}"),
                ))
            }
        };
        if self.value(b).shape() != [fout] {
            return Err(Error::shape(
                "linear",
                format!("bias [{fout}]"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            T::one(),
            &mut out,
            fout as isize,
            1,
        );
        let value = Tensor::new([n, fout], out)?;
        self.record("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    fn feature_dims(&self, f: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.value(f).shape() {
            [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::shape(
                op,
                "[C, H, W] or [1, C, H, W]",
                format!("{s:?}"),
            )),
        }
    }

    /// Bilinear sample of a feature map at `(x, y)` = (column, row); returns `[C]`.
    pub fn bilinear_sample(&mut self, f: Var, x: T, y: T) -> Result<Var> {
        let v = self.bilinear_sample_points(f, &[(x, y)])?;
        let c = self.value(v).shape()[1];
        self.reshape(v, [c])
    }

    /// Bilinear samples at several points; returns `[P, C]`.
    ///
    /// Gradient flows to the feature map only, never to the coordinates.
    pub fn bilinear_sample_points(&mut self, f: Var, points: &[(T, T)]) -> Result<Var> {
        let (c, h, w) = self.feature_dims(f, "bilinear_sample")?;
        let hw = h * w;
        let data = self.value(f).data();
        let max_x = T::lit((w - 1) as f64);
        let max_y = T::lit((h - 1) as f64);
        let mut out = vec![T::zero(); points.len() * c];
        for (p, &(x, y)) in points.iter().enumerate() {
            if !(x >= T::zero() && x <= max_x && y >= T::zero() && y <= max_y) {
                return Err(Error::OutOfBounds {
                    op: "bilinear_sample",
                    x: x.as_f64(),
                    y: y.as_f64(),
                    width: w,
                    height: h,
                });
            }
            let taps = kernels::bilinear_taps(x, y, h, w);
            for ch in 0..c {
                let plane = &data[ch * hw..(ch + 1) * hw];
                out[p * c + ch] = taps.iter().map(|&(idx, wt)| plane[idx] * wt).sum();
            }
        }
        let value = Tensor::new([points.len(), c], out)?;
        self.record(
            "bilinear_sample",
            value,
            &[f],
            Op::BilinearSample {
                f,
                points: points.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", value, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.record("mean", value, &[x], Op::Mean(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::abs);
        self.record("abs", value, &[x], Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.record("square", value, &[x], Op::Square(x))
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mse(self.value(b))?);
        self.record("mse", value, &[a, b], Op::Mse(a, b))
    }

    /// `sum(weight * |a - b|)` as a scalar; unit weight when `None`.
    pub fn l1(&mut self, a: Var, b: Var, weight: Option<&Tensor<T>>) -> Result<Var> {
        self.value(a).expect_same_shape("l1", self.value(b))?;
        if let Some(wt) = weight {
            self.value(a).expect_same_shape("l1", wt)?;
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: T = match weight {
            Some(wt) => av
                .iter()
                .zip(bv)
                .zip(wt.data())
                .map(|((&p, &q), &k)| k * (p - q).abs())
                .sum(),
            None => av.iter().zip(bv).map(|(&p, &q)| (p - q).abs()).sum(),
        };
        let op = Op::L1 {
            a,
            b,
            weight: weight.map(|w| w.data().to_vec()),
        };
        self.record("l1", Tensor::scalar(total), &[a, b], op)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record("reshape", value, &[x], Op::Reshape(x))
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every leaf that requires a gradient gets one (zeros when the loss does
    /// not depend on it); contributions from multiple uses add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_op(op, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(shape, data).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(e, c)| *e += c),
            None => grads[v.0] = Some(contribution),
        }
    }

    fn backward_op(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    need,
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("recorded as rank 4");
                let r = kernels::group_norm_backward(
                    self.value(*x).data(),
                    g,
                    (n, c, h * w),
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    (self.rg(*x), self.rg(*gamma), self.rg(*beta)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(d) = r.dgamma {
                    self.accumulate(grads, *gamma, d);
                }
                if let Some(d) = r.dbeta {
                    self.accumulate(grads, *beta, d);
                }
            }
            Op::Silu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = kernels::sigmoid(v);
                        gv * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *factor).collect());
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*bias) {
                    let (_, _, h, w) = self.value(*x).dims4().expect("recorded as rank 4");
                    let db = g.chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("recorded as rank 4");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let per = (ca + cb) * hw;
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        da.extend_from_slice(&g[s * per..s * per + ca * hw]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        db.extend_from_slice(&g[s * per + ca * hw..(s + 1) * per]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::DownsampleAvg2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("recorded as rank 4");
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] =
                                g[p * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("recorded as rank 4");
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[p * h * w + (i / 2) * w + j / 2] += g[p * ho * wo + i * wo + j];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let [n, fin] = *self.value(*x).shape() else {
                    unreachable!()
                };
                let fout = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        g,
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        n,
                        fin,
                        g,
                        1,
                        fout as isize,
                        self.value(*x).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BilinearSample { f, points } => {
                let (c, h, w) = self
                    .feature_dims(*f, "bilinear_sample")
                    .expect("validated on record");
                let hw = h * w;
                let mut df = vec![T::zero(); c * hw];
                for (p, &(x, y)) in points.iter().enumerate() {
                    let taps = kernels::bilinear_taps(x, y, h, w);
                    for ch in 0..c {
                        let gv = g[p * c + ch];
                        for &(idx, wt) in &taps {
                            df[ch * hw + idx] += gv * wt;
                        }
                    }
                }
                self.accumulate(grads, *f, df);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Abs(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * sign(v))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * two * v)
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(a, b) => {
                let n = T::lit(self.value(*a).numel() as f64);
                let k = g[0] * T::lit(2.0) / n;
                let da: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&p, &q)| k * (p - q))
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::L1 { a, b, weight } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<T> = match weight {
                    Some(wt) => av
                        .iter()
                        .zip(bv)
                        .zip(wt)
                        .map(|((&p, &q), &k)| g[0] * k * sign(p - q))
                        .collect(),
                    None => av
                        .iter()
                        .zip(bv)
                        .map(|(&p, &q)| g[0] * sign(p - q))
                        .collect(),
                };
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
