//! Wengert tape: ops recorded in topological order during the forward
//! pass, replayed in reverse for gradients. Gradients accumulate
//! additively across fan-out; a fresh tape starts from zero.

use super::kernels as kn;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    scalar64: Option<f64>,
}

enum Op {
    Leaf,
    Conv3d { x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize },
    ConvT3d { x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize },
    Linear { x: ValueId, w: ValueId, b: ValueId },
    GroupNorm { x: ValueId, gamma: ValueId, beta: ValueId, groups: usize, eps: f32, stats: Vec<(f32, f32)> },
    Silu { x: ValueId },
    Sigmoid { x: ValueId },
    Exp { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f32 },
    AddConst { x: ValueId, c: f32 },
    MulScalar { x: ValueId, s: ValueId },
    ScaleShift { x: ValueId, scale: ValueId, shift: ValueId },
    Mean { x: ValueId },
    Sum { x: ValueId },
    Mse { a: ValueId, b: ValueId },
    SoftmaxCe { logits: ValueId, targets: Vec<usize> },
    Concat { a: ValueId, b: ValueId },
    SliceCols { x: ValueId, from: usize, to: usize },
    Upsample2 { x: ValueId },
    Downsample2 { x: ValueId },
    GapSpatial { x: ValueId },
    L2NormRows { x: ValueId, norms: Vec<f32> },
}

/// Records a single forward computation; not shared across threads while
/// being written. Independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::Dimension(format!("{what} must be rank 5, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { value, requires_grad, op, scalar64: None });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value64: f64, requires_grad: bool, op: Op) -> ValueId {
        let id = self.push(Tensor::scalar(value64 as f32), requires_grad, op);
        self.nodes[id.0].scalar64 = Some(value64);
        id
    }

    /// Scalar value in f64 where the op computed one (the reductions);
    /// falls back to the stored f32.
    pub fn scalar_f64(&self, id: ValueId) -> f64 {
        self.nodes[id.0]
            .scalar64
            .unwrap_or(self.nodes[id.0].value.data()[0] as f64)
    }

    fn rg(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward() wrt the given value, if any flowed.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ----------------------------------------------------------

    pub fn conv3d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        if stride < 1 {
            return Err(Error::Config("conv3d stride must be >= 1".into()));
        }
        let xs = dims5(self.value(x), "conv3d input")?;
        let ws = dims5(self.value(w), "conv3d weight")?;
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv3d channel axis: input has C={}, weight expects C={}",
                xs[1], ws[1]
            )));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "conv3d bias axis 0: expected [{}], got {:?}",
                ws[0],
                self.value(b).shape()
            )));
        }
        let mut os = [xs[0], ws[0], 0, 0, 0];
        for ax in 0..3 {
            os[2 + ax] = kn::conv3d_out_extent(xs[2 + ax], ws[2 + ax], stride, pad).ok_or_else(|| {
                Error::Dimension(format!(
                    "conv3d spatial axis {ax}: kernel {} exceeds padded input {}",
                    ws[2 + ax],
                    xs[2 + ax] + 2 * pad
                ))
            })?;
        }
        let out = kn::conv3d_fwd(
            self.value(x).data(),
            &xs,
            self.value(w).data(),
            &ws,
            self.value(b).data(),
            stride,
            pad,
            &os,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(os.to_vec(), out)?, rg, Op::Conv3d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose3d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        if stride < 1 {
            return Err(Error::Config("conv_transpose3d stride must be >= 1".into()));
        }
        let xs = dims5(self.value(x), "conv_transpose3d input")?;
        let ws = dims5(self.value(w), "conv_transpose3d weight")?;
        if xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "conv_transpose3d channel axis: input has C={}, weight expects C={}",
                xs[1], ws[0]
            )));
        }
        if self.value(b).shape() != [ws[1]] {
            return Err(Error::Dimension(format!(
                "conv_transpose3d bias axis 0: expected [{}], got {:?}",
                ws[1],
                self.value(b).shape()
            )));
        }
        let mut os = [xs[0], ws[1], 0, 0, 0];
        for ax in 0..3 {
            os[2 + ax] = kn::convt3d_out_extent(xs[2 + ax], ws[2 + ax], stride, pad).ok_or_else(|| {
                Error::Dimension(format!("conv_transpose3d spatial axis {ax}: padding too large"))
            })?;
        }
        let out = kn::convt3d_fwd(
            self.value(x).data(),
            &xs,
            self.value(w).data(),
            &ws,
            self.value(b).data(),
            stride,
            pad,
            &os,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(os.to_vec(), out)?, rg, Op::ConvT3d { x, w, b, stride, pad }))
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Dimension(format!("linear expects rank-2 input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "linear inner axis: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "linear bias axis 0: expected [{}], got {:?}",
                ws[0],
                self.value(b).shape()
            )));
        }
        let out = kn::linear_fwd(self.value(x).data(), xs[0], xs[1], self.value(w).data(), ws[0], self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![xs[0], ws[0]], out)?, rg, Op::Linear { x, w, b }))
    }

    pub fn group_norm(&mut self, x: ValueId, groups: usize, gamma: ValueId, beta: ValueId, eps: f32) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::Config("group_norm eps must be > 0".into()));
        }
        let xs = dims5(self.value(x), "group_norm input")?;
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: C={c} not divisible by groups={groups}")));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "group_norm {name} axis 0: expected [{c}], got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        let sp = xs[2] * xs[3] * xs[4];
        let (y, stats) = kn::group_norm_fwd(
            self.value(x).data(),
            xs[0],
            c,
            sp,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(xs.to_vec(), y)?,
            rg,
            Op::GroupNorm { x, gamma, beta, groups, eps, stats },
        ))
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: y }, rg, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: y }, rg, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: y }, rg, Op::Exp { x })
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let y: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&u, &v)| u + v).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: y }, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let y: Vec<f32> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&u, &v)| u * v).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: y }, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: ValueId, c: f32) -> ValueId {
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: y }, rg, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: ValueId, c: f32) -> ValueId {
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: y }, rg, Op::AddConst { x, c })
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "mul_scalar: scalar operand must have 1 element, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let y: Vec<f32> = self.value(x).data().iter().map(|&v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor { shape, data: y }, rg, Op::MulScalar { x, s }))
    }

    /// Per-(sample, channel) modulation: y = x * (1 + scale) + shift,
    /// broadcast over the spatial axes. x is [N,C,D,H,W]; scale and shift
    /// are [N,C].
    pub fn scale_shift(&mut self, x: ValueId, scale: ValueId, shift: ValueId) -> Result<ValueId> {
        let xs = dims5(self.value(x), "scale_shift input")?;
        for (name, id) in [("scale", scale), ("shift", shift)] {
            if self.value(id).shape() != [xs[0], xs[1]] {
                return Err(Error::Dimension(format!(
                    "scale_shift {name}: expected [{}, {}], got {:?}",
                    xs[0],
                    xs[1],
                    self.value(id).shape()
                )));
            }
        }
        let sp = xs[2] * xs[3] * xs[4];
        let mut y = vec![0.0f32; self.value(x).numel()];
        {
            let xd = self.value(x).data();
            let sd = self.value(scale).data();
            let hd = self.value(shift).data();
            for nc in 0..xs[0] * xs[1] {
                let s = 1.0 + sd[nc];
                let h = hd[nc];
                for (yv, &xv) in y[nc * sp..][..sp].iter_mut().zip(&xd[nc * sp..][..sp]) {
                    *yv = xv * s + h;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(Tensor::new(xs.to_vec(), y)?, rg, Op::ScaleShift { x, scale, shift }))
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let sum: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let y = sum / self.value(x).numel() as f64;
        let rg = self.rg(x);
        self.push_scalar(y, rg, Op::Mean { x })
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let sum: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push_scalar(sum, rg, Op::Sum { x })
    }

    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mse")?;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&u, &v)| {
                let d = (u - v) as f64;
                d * d
            })
            .sum();
        let y = sum / self.value(a).numel() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_scalar(y, rg, Op::Mse { a, b }))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Dimension(format!("softmax_cross_entropy expects rank-2 logits, got {ls:?}")));
        }
        if targets.len() != ls[0] {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy targets axis 0: expected {}, got {}",
                ls[0],
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= ls[1]) {
            return Err(Error::Contract(format!("softmax_cross_entropy target {t} out of range for {} classes", ls[1])));
        }
        let y = kn::softmax_ce_fwd(self.value(logits).data(), ls[0], ls[1], targets);
        let rg = self.rg(logits);
        Ok(self.push_scalar(y, rg, Op::SoftmaxCe { logits, targets: targets.to_vec() }))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != sb.len() || sa.len() < 2 {
            return Err(Error::Dimension(format!("concat: ranks differ or < 2 ({sa:?} vs {sb:?})")));
        }
        for ax in 0..sa.len() {
            if ax != 1 && sa[ax] != sb[ax] {
                return Err(Error::Dimension(format!(
                    "concat axis {ax}: extents {} and {} differ",
                    sa[ax], sb[ax]
                )));
            }
        }
        let rest: usize = sa[2..].iter().product();
        let n = sa[0];
        let (ca, cb) = (sa[1], sb[1]);
        let mut y = Vec::with_capacity((ca + cb) * n * rest);
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for ni in 0..n {
                y.extend_from_slice(&da[ni * ca * rest..][..ca * rest]);
                y.extend_from_slice(&db[ni * cb * rest..][..cb * rest]);
            }
        }
        let mut os = sa.clone();
        os[1] = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(os, y)?, rg, Op::Concat { a, b }))
    }

    /// Columns [from, to) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: ValueId, from: usize, to: usize) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!("slice_cols expects rank-2 input, got {xs:?}")));
        }
        if from >= to || to > xs[1] {
            return Err(Error::Dimension(format!("slice_cols: [{from}, {to}) invalid for {} columns", xs[1])));
        }
        let w = to - from;
        let mut y = Vec::with_capacity(xs[0] * w);
        for bi in 0..xs[0] {
            y.extend_from_slice(&self.value(x).data()[bi * xs[1] + from..][..w]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], w], y)?, rg, Op::SliceCols { x, from, to }))
    }

    /// Nearest-neighbor spatial upsampling by 2x.
    pub fn upsample_nearest2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = dims5(self.value(x), "upsample_nearest2 input")?;
        let [n, c, d, h, w] = xs;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut y = vec![0.0f32; n * c * od * oh * ow];
        {
            let xd = self.value(x).data();
            for nc in 0..n * c {
                let src = &xd[nc * d * h * w..][..d * h * w];
                let dst = &mut y[nc * od * oh * ow..][..od * oh * ow];
                for dz in 0..od {
                    for dy in 0..oh {
                        let srow = &src[((dz / 2) * h + dy / 2) * w..][..w];
                        let drow = &mut dst[(dz * oh + dy) * ow..][..ow];
                        for (dx, dv) in drow.iter_mut().enumerate() {
                            *dv = srow[dx / 2];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, od, oh, ow], y)?, rg, Op::Upsample2 { x }))
    }

    /// Nearest-neighbor spatial downsampling by 2x (keeps even-indexed voxels).
    pub fn downsample_nearest2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = dims5(self.value(x), "downsample_nearest2 input")?;
        let [n, c, d, h, w] = xs;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("downsample_nearest2: odd spatial extents {:?}", &xs[2..])));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut y = vec![0.0f32; n * c * od * oh * ow];
        {
            let xd = self.value(x).data();
            for nc in 0..n * c {
                let src = &xd[nc * d * h * w..][..d * h * w];
                let dst = &mut y[nc * od * oh * ow..][..od * oh * ow];
                for dz in 0..od {
                    for dy in 0..oh {
                        for dx in 0..ow {
                            dst[(dz * oh + dy) * ow + dx] = src[((2 * dz) * h + 2 * dy) * w + 2 * dx];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, od, oh, ow], y)?, rg, Op::Downsample2 { x }))
    }

    /// Global average pool over the spatial axes: [N,C,D,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = dims5(self.value(x), "global_avg_pool input")?;
        let sp = xs[2] * xs[3] * xs[4];
        let mut y = vec![0.0f32; xs[0] * xs[1]];
        {
            let xd = self.value(x).data();
            for (nc, yv) in y.iter_mut().enumerate() {
                let sum: f64 = xd[nc * sp..][..sp].iter().map(|&v| v as f64).sum();
                *yv = (sum / sp as f64) as f32;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], y)?, rg, Op::GapSpatial { x }))
    }

    /// Row-wise L2 normalization of a rank-2 tensor.
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!("l2_normalize_rows expects rank-2 input, got {xs:?}")));
        }
        let (b, f) = (xs[0], xs[1]);
        let mut y = vec![0.0f32; b * f];
        let mut norms = vec![0.0f32; b];
        {
            let xd = self.value(x).data();
            for bi in 0..b {
                let row = &xd[bi * f..][..f];
                let n = (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt().max(1e-12);
                norms[bi] = n as f32;
                for (yv, &xv) in y[bi * f..][..f].iter_mut().zip(row) {
                    *yv = xv / norms[bi];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, y)?, rg, Op::L2NormRows { x, norms }))
    }

    // ---- 64-bit re-evaluation ------------------------------------------

    /// Recomputes the recorded graph up to `target` entirely in f64 and
    /// returns that node's values. The finite-difference oracle runs on
    /// this so difference quotients are not drowned in f32 rounding; it
    /// shares no code with the fast forward kernels.
    pub fn eval_f64(&self, target: ValueId) -> Vec<f64> {
        let mut vals: Vec<Option<Vec<f64>>> = vec![None; target.0 + 1];
        for i in 0..=target.0 {
            let shape = self.nodes[i].value.shape();
            let get = |id: &ValueId, vals: &[Option<Vec<f64>>]| -> Vec<f64> {
                vals[id.0].clone().expect("topological order guarantees inputs are computed")
            };
            let sd5 = |id: &ValueId| -> [usize; 5] {
                let s = self.nodes[id.0].value.shape();
                [s[0], s[1], s[2], s[3], s[4]]
            };
            let out: Vec<f64> = match &self.nodes[i].op {
                Op::Leaf => self.nodes[i].value.data().iter().map(|&v| v as f64).collect(),
                Op::Conv3d { x, w, b, stride, pad } => kn::conv3d_fwd_ref64(
                    &get(x, &vals),
                    &sd5(x),
                    &get(w, &vals),
                    &sd5(w),
                    &get(b, &vals),
                    *stride,
                    *pad,
                    &[shape[0], shape[1], shape[2], shape[3], shape[4]],
                ),
                Op::ConvT3d { x, w, b, stride, pad } => kn::convt3d_fwd_ref64(
                    &get(x, &vals),
                    &sd5(x),
                    &get(w, &vals),
                    &sd5(w),
                    &get(b, &vals),
                    *stride,
                    *pad,
                    &[shape[0], shape[1], shape[2], shape[3], shape[4]],
                ),
                Op::Linear { x, w, b } => {
                    let xs = self.nodes[x.0].value.shape();
                    let ws = self.nodes[w.0].value.shape();
                    kn::linear_fwd_ref64(&get(x, &vals), xs[0], xs[1], &get(w, &vals), ws[0], &get(b, &vals))
                }
                Op::GroupNorm { x, gamma, beta, groups, eps, .. } => {
                    let xs = sd5(x);
                    let (n, c) = (xs[0], xs[1]);
                    let sp = xs[2] * xs[3] * xs[4];
                    let cg = c / groups;
                    let m = (cg * sp) as f64;
                    let xv = get(x, &vals);
                    let gv = get(gamma, &vals);
                    let bv = get(beta, &vals);
                    let mut y = vec![0.0f64; xv.len()];
                    for ni in 0..n {
                        for gi in 0..*groups {
                            let base = (ni * c + gi * cg) * sp;
                            let grp = &xv[base..base + cg * sp];
                            let mean = grp.iter().sum::<f64>() / m;
                            let var = (grp.iter().map(|&v| v * v).sum::<f64>() / m - mean * mean).max(0.0);
                            let istd = 1.0 / (var + *eps as f64).sqrt();
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                for j in 0..sp {
                                    y[base + ci * sp + j] = (xv[base + ci * sp + j] - mean) * istd * gv[ch] + bv[ch];
                                }
                            }
                        }
                    }
                    y
                }
                Op::Silu { x } => get(x, &vals).iter().map(|&v| v / (1.0 + (-v).exp())).collect(),
                Op::Sigmoid { x } => get(x, &vals).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                Op::Exp { x } => get(x, &vals).iter().map(|&v| v.exp()).collect(),
                Op::Add { a, b } => get(a, &vals).iter().zip(&get(b, &vals)).map(|(&u, &v)| u + v).collect(),
                Op::Mul { a, b } => get(a, &vals).iter().zip(&get(b, &vals)).map(|(&u, &v)| u * v).collect(),
                Op::Scale { x, c } => get(x, &vals).iter().map(|&v| v * *c as f64).collect(),
                Op::AddConst { x, c } => get(x, &vals).iter().map(|&v| v + *c as f64).collect(),
                Op::MulScalar { x, s } => {
                    let sv = get(s, &vals)[0];
                    get(x, &vals).iter().map(|&v| v * sv).collect()
                }
                Op::ScaleShift { x, scale, shift } => {
                    let xs = sd5(x);
                    let sp = xs[2] * xs[3] * xs[4];
                    let xv = get(x, &vals);
                    let sv = get(scale, &vals);
                    let hv = get(shift, &vals);
                    let mut y = vec![0.0f64; xv.len()];
                    for nc in 0..xs[0] * xs[1] {
                        for j in 0..sp {
                            y[nc * sp + j] = xv[nc * sp + j] * (1.0 + sv[nc]) + hv[nc];
                        }
                    }
                    y
                }
                Op::Mean { x } => {
                    let v = get(x, &vals);
                    vec![v.iter().sum::<f64>() / v.len() as f64]
                }
                Op::Sum { x } => vec![get(x, &vals).iter().sum::<f64>()],
                Op::Mse { a, b } => {
                    let av = get(a, &vals);
                    let bv = get(b, &vals);
                    let s: f64 = av.iter().zip(&bv).map(|(&u, &v)| (u - v) * (u - v)).sum();
                    vec![s / av.len() as f64]
                }
                Op::SoftmaxCe { logits, targets } => {
                    let ls = self.nodes[logits.0].value.shape();
                    let (b, k) = (ls[0], ls[1]);
                    let lv = get(logits, &vals);
                    let mut total = 0.0f64;
                    for bi in 0..b {
                        let row = &lv[bi * k..][..k];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                        total += lse - row[targets[bi]];
                    }
                    vec![total / b as f64]
                }
                Op::Concat { a, b } => {
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    let rest: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * rest, sb[1] * rest);
                    let av = get(a, &vals);
                    let bv = get(b, &vals);
                    let mut y = Vec::with_capacity(av.len() + bv.len());
                    for ni in 0..sa[0] {
                        y.extend_from_slice(&av[ni * ca..][..ca]);
                        y.extend_from_slice(&bv[ni * cb..][..cb]);
                    }
                    y
                }
                Op::SliceCols { x, from, to } => {
                    let xs = self.nodes[x.0].value.shape();
                    let xv = get(x, &vals);
                    let w = to - from;
                    let mut y = Vec::with_capacity(xs[0] * w);
                    for bi in 0..xs[0] {
                        y.extend_from_slice(&xv[bi * xs[1] + from..][..w]);
                    }
                    y
                }
                Op::Upsample2 { x } => {
                    let [n, c, d, h, w] = sd5(x);
                    let xv = get(x, &vals);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut y = vec![0.0f64; n * c * 8 * d * h * w];
                    for nc in 0..n * c {
                        for dz in 0..2 * d {
                            for dy in 0..oh {
                                for dx in 0..ow {
                                    y[nc * 8 * d * h * w + (dz * oh + dy) * ow + dx] =
                                        xv[nc * d * h * w + ((dz / 2) * h + dy / 2) * w + dx / 2];
                                }
                            }
                        }
                    }
                    y
                }
                Op::Downsample2 { x } => {
                    let [n, c, d, h, w] = sd5(x);
                    let xv = get(x, &vals);
                    let (od, oh, ow) = (d / 2, h / 2, w / 2);
                    let mut y = vec![0.0f64; n * c * od * oh * ow];
                    for nc in 0..n * c {
                        for dz in 0..od {
                            for dy in 0..oh {
                                for dx in 0..ow {
                                    y[nc * od * oh * ow + (dz * oh + dy) * ow + dx] =
                                        xv[nc * d * h * w + ((2 * dz) * h + 2 * dy) * w + 2 * dx];
                                }
                            }
                        }
                    }
                    y
                }
                Op::GapSpatial { x } => {
                    let xs = sd5(x);
                    let sp = xs[2] * xs[3] * xs[4];
                    let xv = get(x, &vals);
                    (0..xs[0] * xs[1])
                        .map(|nc| xv[nc * sp..][..sp].iter().sum::<f64>() / sp as f64)
                        .collect()
                }
                Op::L2NormRows { x, .. } => {
                    let xs = self.nodes[x.0].value.shape();
                    let (b, f) = (xs[0], xs[1]);
                    let xv = get(x, &vals);
                    let mut y = vec![0.0f64; b * f];
                    for bi in 0..b {
                        let row = &xv[bi * f..][..f];
                        let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt().max(1e-12);
                        for (yv, &v) in y[bi * f..][..f].iter_mut().zip(row) {
                            *yv = v / n;
                        }
                    }
                    y
                }
            };
            vals[i] = Some(out);
        }
        vals[target.0].take().expect("target computed")
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// requires_grad value reachable from the loss; others stay absent.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(go) = self.grads[i].take() else { continue };
            self.apply_backward(i, &go);
            self.grads[i] = Some(go);
        }
        Ok(())
    }

    fn acc_into(&mut self, id: ValueId, contrib: impl Iterator<Item = f32>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
        for (gv, c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    fn apply_backward(&mut self, i: usize, go: &[f32]) {
        // Ops that need heavy kernels compute full contribution vectors;
        // elementwise ones stream directly into the accumulator.
        let node_op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &node_op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride, pad } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let ws = dims5(self.value(*w), "").unwrap();
                let os = dims5(&self.nodes[i].value, "").unwrap();
                let (gx, gw, gb) = kn::conv3d_bwd(
                    self.value(*x).data(),
                    &xs,
                    self.value(*w).data(),
                    &ws,
                    go,
                    &os,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    self.acc_into(*x, gx.into_iter());
                }
                if let Some(gw) = gw {
                    self.acc_into(*w, gw.into_iter());
                }
                self.acc_into(*b, gb.into_iter());
            }
            Op::ConvT3d { x, w, b, stride, pad } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let ws = dims5(self.value(*w), "").unwrap();
                let os = dims5(&self.nodes[i].value, "").unwrap();
                let (gx, gw, gb) = kn::convt3d_bwd(
                    self.value(*x).data(),
                    &xs,
                    self.value(*w).data(),
                    &ws,
                    go,
                    &os,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    self.acc_into(*x, gx.into_iter());
                }
                if let Some(gw) = gw {
                    self.acc_into(*w, gw.into_iter());
                }
                self.acc_into(*b, gb.into_iter());
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (gx, gw, gb) = kn::linear_bwd(
                    self.value(*x).data(),
                    xs[0],
                    xs[1],
                    self.value(*w).data(),
                    ws[0],
                    go,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    self.acc_into(*x, gx.into_iter());
                }
                if let Some(gw) = gw {
                    self.acc_into(*w, gw.into_iter());
                }
                self.acc_into(*b, gb.into_iter());
            }
            Op::GroupNorm { x, gamma, beta, groups, stats, .. } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let sp = xs[2] * xs[3] * xs[4];
                let (gx, ggamma, gbeta) = kn::group_norm_bwd(
                    self.value(*x).data(),
                    xs[0],
                    xs[1],
                    sp,
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    go,
                );
                self.acc_into(*x, gx.into_iter());
                self.acc_into(*gamma, ggamma.into_iter());
                self.acc_into(*beta, gbeta.into_iter());
            }
            Op::Silu { x } => {
                let contrib: Vec<f32> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc_into(*x, contrib.into_iter());
            }
            Op::Sigmoid { x } => {
                let contrib: Vec<f32> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                self.acc_into(*x, contrib.into_iter());
            }
            Op::Exp { x } => {
                let contrib: Vec<f32> = self.nodes[i].value.data().iter().zip(go).map(|(&y, &g)| g * y).collect();
                self.acc_into(*x, contrib.into_iter());
            }
            Op::Add { a, b } => {
                self.acc_into(*a, go.iter().copied());
                self.acc_into(*b, go.iter().copied());
            }
            Op::Mul { a, b } => {
                let ga: Vec<f32> = self.value(*b).data().iter().zip(go).map(|(&v, &g)| g * v).collect();
                let gb: Vec<f32> = self.value(*a).data().iter().zip(go).map(|(&v, &g)| g * v).collect();
                self.acc_into(*a, ga.into_iter());
                self.acc_into(*b, gb.into_iter());
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc_into(*x, go.iter().map(move |&g| g * c));
            }
            Op::AddConst { x, .. } => {
                self.acc_into(*x, go.iter().copied());
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let gs: f64 = self.value(*x).data().iter().zip(go).map(|(&v, &g)| (g * v) as f64).sum();
                self.acc_into(*x, go.iter().map(move |&g| g * sv));
                self.acc_into(*s, std::iter::once(gs as f32));
            }
            Op::ScaleShift { x, scale, shift } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let sp = xs[2] * xs[3] * xs[4];
                let nc = xs[0] * xs[1];
                let sd = self.value(*scale).data();
                let xd = self.value(*x).data();
                let mut gx = vec![0.0f32; xd.len()];
                let mut gscale = vec![0.0f32; nc];
                let mut gshift = vec![0.0f32; nc];
                for j in 0..nc {
                    let s1 = 1.0 + sd[j];
                    let mut acc_s = 0.0f64;
                    let mut acc_h = 0.0f64;
                    for ((gxv, &xv), &g) in gx[j * sp..][..sp].iter_mut().zip(&xd[j * sp..][..sp]).zip(&go[j * sp..][..sp]) {
                        *gxv = g * s1;
                        acc_s += (g * xv) as f64;
                        acc_h += g as f64;
                    }
                    gscale[j] = acc_s as f32;
                    gshift[j] = acc_h as f32;
                }
                self.acc_into(*x, gx.into_iter());
                self.acc_into(*scale, gscale.into_iter());
                self.acc_into(*shift, gshift.into_iter());
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let g = go[0] / n as f32;
                self.acc_into(*x, std::iter::repeat(g).take(n));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.acc_into(*x, std::iter::repeat(go[0]).take(n));
            }
            Op::Mse { a, b } => {
                let n = self.value(*a).numel() as f32;
                let c = 2.0 * go[0] / n;
                let diff: Vec<f32> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&u, &v)| c * (u - v))
                    .collect();
                self.acc_into(*a, diff.iter().copied());
                self.acc_into(*b, diff.iter().map(|&d| -d));
            }
            Op::SoftmaxCe { logits, targets } => {
                let ls = self.value(*logits).shape().to_vec();
                let gl = kn::softmax_ce_bwd(self.value(*logits).data(), ls[0], ls[1], targets, go[0]);
                self.acc_into(*logits, gl.into_iter());
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let rest: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * rest, sb[1] * rest);
                let mut ga = Vec::with_capacity(sa.iter().product());
                let mut gb = Vec::with_capacity(sb.iter().product());
                for ni in 0..sa[0] {
                    let base = ni * (ca + cb);
                    ga.extend_from_slice(&go[base..base + ca]);
                    gb.extend_from_slice(&go[base + ca..base + ca + cb]);
                }
                self.acc_into(*a, ga.into_iter());
                self.acc_into(*b, gb.into_iter());
            }
            Op::SliceCols { x, from, to } => {
                let xs = self.value(*x).shape().to_vec();
                let w = to - from;
                let mut gx = vec![0.0f32; xs[0] * xs[1]];
                for bi in 0..xs[0] {
                    gx[bi * xs[1] + from..][..w].copy_from_slice(&go[bi * w..][..w]);
                }
                self.acc_into(*x, gx.into_iter());
            }
            Op::Upsample2 { x } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let [n, c, d, h, w] = xs;
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0f32; n * c * d * h * w];
                for nc in 0..n * c {
                    let src = &go[nc * 8 * d * h * w..][..8 * d * h * w];
                    let dst = &mut gx[nc * d * h * w..][..d * h * w];
                    for dz in 0..2 * d {
                        for dy in 0..oh {
                            let drow = &mut dst[((dz / 2) * h + dy / 2) * w..][..w];
                            let srow = &src[(dz * oh + dy) * ow..][..ow];
                            for (dx, &g) in srow.iter().enumerate() {
                                drow[dx / 2] += g;
                            }
                        }
                    }
                }
                self.acc_into(*x, gx.into_iter());
            }
            Op::Downsample2 { x } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let [n, c, d, h, w] = xs;
                let (od, oh, ow) = (d / 2, h / 2, w / 2);
                let mut gx = vec![0.0f32; n * c * d * h * w];
                for nc in 0..n * c {
                    let src = &go[nc * od * oh * ow..][..od * oh * ow];
                    let dst = &mut gx[nc * d * h * w..][..d * h * w];
                    for dz in 0..od {
                        for dy in 0..oh {
                            for dx in 0..ow {
                                dst[((2 * dz) * h + 2 * dy) * w + 2 * dx] = src[(dz * oh + dy) * ow + dx];
                            }
                        }
                    }
                }
                self.acc_into(*x, gx.into_iter());
            }
            Op::GapSpatial { x } => {
                let xs = dims5(self.value(*x), "").unwrap();
                let sp = xs[2] * xs[3] * xs[4];
                let mut gx = vec![0.0f32; self.value(*x).numel()];
                for (nc, &g) in go.iter().enumerate() {
                    let v = g / sp as f32;
                    for gv in gx[nc * sp..][..sp].iter_mut() {
                        *gv = v;
                    }
                }
                self.acc_into(*x, gx.into_iter());
            }
            Op::L2NormRows { x, norms } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, f) = (xs[0], xs[1]);
                let y = self.nodes[i].value.data();
                let mut gx = vec![0.0f32; b * f];
                for bi in 0..b {
                    let yrow = &y[bi * f..][..f];
                    let grow = &go[bi * f..][..f];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| (yv * gv) as f64).sum();
                    let n = norms[bi];
                    for ((gxv, &gv), &yv) in gx[bi * f..][..f].iter_mut().zip(grow).zip(yrow) {
                        *gxv = (gv - yv * dot as f32) / n;
                    }
                }
                self.acc_into(*x, gx.into_iter());
            }
        }
        self.nodes[i].op = node_op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn square_gradient_at_three() {
        // f(x) = x*x at x=3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fanout_accumulates() {
        // f(x) = x + x -> grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 2.0);
    }

    #[test]
    fn constant_wrt_x_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.leaf(Tensor::scalar(5.0), false);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn linearity_of_backward() {
        // backward of (l1 + l2) equals backward of l1 plus backward of l2
        let xv = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let run = |combined: bool| -> Vec<Vec<f32>> {
            let mut out = Vec::new();
            if combined {
                let mut tape = Tape::new();
                let x = tape.leaf(xv.clone(), true);
                let sq = tape.mul(x, x).unwrap();
                let l1 = tape.sum(sq);
                let l2 = tape.mean(x);
                let l = tape.add(l1, l2).unwrap();
                tape.backward(l).unwrap();
                out.push(tape.grad(x).unwrap().to_vec());
            } else {
                for which in 0..2 {
                    let mut tape = Tape::new();
                    let x = tape.leaf(xv.clone(), true);
                    let l = if which == 0 {
                        let sq = tape.mul(x, x).unwrap();
                        tape.sum(sq)
                    } else {
                        tape.mean(x)
                    };
                    tape.backward(l).unwrap();
                    out.push(tape.grad(x).unwrap().to_vec());
                }
            }
            out
        };
        let combined = &run(true)[0];
        let parts = run(false);
        for i in 0..3 {
            assert!((combined[i] - (parts[0][i] + parts[1][i])).abs() < 1e-6);
        }
    }

    #[test]
    fn conv3d_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[1, 1, 3, 3, 3], 4), false);
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv3d_all_ones_cube_sums_to_eight() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2, 2], 1.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2, 2], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert!((tape.value(y).data()[0] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn conv3d_zero_kernel_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[2, 3, 4, 4, 4], 11), false);
        let w = tape.leaf(Tensor::zeros(&[5, 3, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[5]), false);
        let y = tape.conv3d(x, w, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_same_padding_preserves_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[1, 2, 5, 6, 7], 3), false);
        let w = tape.leaf(Tensor::randn(&[4, 2, 3, 3, 3], 5), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.conv3d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 5, 6, 7]);
    }

    #[test]
    fn conv3d_names_offending_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[4, 3, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        match tape.conv3d(x, w, b, 1, 1) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("channel"), "{msg}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 2, 2, 2], 3.7), false);
        let gamma = tape.leaf(Tensor::full(&[4], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-3));
    }

    #[test]
    fn group_norm_standardizes_plus_minus_one() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..8).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2, 2], data).unwrap(), false);
        let gamma = tape.leaf(Tensor::full(&[1], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.group_norm(x, 1, gamma, beta, 1e-10).unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            let expect = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-4, "{v} vs {expect}");
        }
    }

    #[test]
    fn group_norm_beta_dominates_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[2, 4, 2, 2, 2], 6), false);
        let gamma = tape.leaf(Tensor::zeros(&[4]), false);
        let beta = tape.leaf(Tensor::full(&[4], 5.0), false);
        let y = tape.group_norm(x, 4, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 6, 2, 2, 2]), false);
        let gamma = tape.leaf(Tensor::full(&[6], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(&[6]), false);
        assert!(matches!(tape.group_norm(x, 4, gamma, beta, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn fast_kernels_match_naive_references() {
        // eval_f64 recomputes via the simple reference loops; the fast
        // rayon kernels must agree within f32 accumulation slack.
        for s in 0..6u64 {
            let stride = 1 + (s % 2) as usize;
            let pad = (s % 2) as usize;
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(&[2, 3, 5, 5, 5], 70 + s), false);
            let w = tape.leaf(Tensor::randn(&[4, 3, 3, 3, 3], 80 + s), false);
            let b = tape.leaf(Tensor::randn(&[4], 90 + s), false);
            let y = tape.conv3d(x, w, b, stride, pad).unwrap();
            let wt = tape.leaf(Tensor::randn(&[3, 2, 2, 2, 2], 95 + s), false);
            let bt = tape.leaf(Tensor::randn(&[2], 96 + s), false);
            let yt = tape.conv_transpose3d(x, wt, bt, 2, 0).unwrap();
            let xf = tape.leaf(Tensor::randn(&[4, 6], 97 + s), false);
            let wf = tape.leaf(Tensor::randn(&[3, 6], 98 + s), false);
            let bf = tape.leaf(Tensor::randn(&[3], 99 + s), false);
            let yf = tape.linear(xf, wf, bf).unwrap();
            for id in [y, yt, yf] {
                let fast = tape.value(id).data();
                let reference = tape.eval_f64(id);
                assert_eq!(fast.len(), reference.len());
                for (a, b) in fast.iter().zip(&reference) {
                    assert!((*a as f64 - b).abs() < 1e-4, "fast {a} vs reference {b}");
                }
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut outs: Vec<Vec<f32>> = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(&[2, 3, 8, 8, 8], 42), true);
            let w = tape.leaf(Tensor::randn(&[4, 3, 3, 3, 3], 43), true);
            let b = tape.leaf(Tensor::randn(&[4], 44), true);
            let y = tape.conv3d(x, w, b, 1, 1).unwrap();
            let s = tape.silu(y);
            let loss = tape.mean(s);
            tape.backward(loss).unwrap();
            let mut flat = tape.value(s).data().to_vec();
            flat.extend_from_slice(tape.grad(w).unwrap());
            outs.push(flat);
        }
        assert_eq!(outs[0], outs[1]);
    }
}
