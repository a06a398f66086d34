//! Wengert-list reverse-mode differentiation.
//!
//! Recording is explicit: build a [`Tape`] per loss evaluation, push ops,
//! then replay in reverse. Inference paths call the eager kernels and never
//! touch a tape. Node values are immutable once produced.

use super::kernels::ColBuf;
use super::{kernels, NdArray, ParamSet, Precision};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Sqrt(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ChannelAffine {
        x: usize,
        gain: usize,
        bias: usize,
    },
    ScaleShift {
        x: usize,
        ss: usize,
    },
    ConcatCh(usize, usize),
    ChannelMean(usize),
    ChannelStd(usize),
    ConcatVecs(Vec<usize>),
    Reshape(usize),
    MeanAll(usize),
    SumAll(usize),
    CosineSim(usize, usize),
}

struct Node {
    op: Op,
    value: NdArray,
    needs_grad: bool,
    aux: Option<ColBuf>,
}

/// Recording context for one loss evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Full)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: NdArray) -> Var {
        let needs_grad = self.op_needs_grad(&op);
        self.push_full(op, value, needs_grad, None)
    }

    fn push_full(&mut self, op: Op, value: NdArray, needs_grad: bool, aux: Option<ColBuf>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        match op {
            Op::Input => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCh(a, b)
            | Op::CosineSim(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::ChannelMean(a)
            | Op::ChannelStd(a)
            | Op::Reshape(a)
            | Op::MeanAll(a)
            | Op::SumAll(a) => self.ng(*a),
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => {
                self.ng(*x) || self.ng(*w) || self.ng(*b)
            }
            Op::ChannelAffine { x, gain, bias } => {
                self.ng(*x) || self.ng(*gain) || self.ng(*bias)
            }
            Op::ScaleShift { x, ss } => self.ng(*x) || self.ng(*ss),
            Op::ConcatVecs(parts) => parts.iter().any(|p| self.ng(*p)),
        }
    }

    /// Register a differentiable leaf (parameters, probed inputs).
    pub fn input(&mut self, value: NdArray) -> Var {
        self.push_full(Op::Input, value, true, None)
    }

    /// Register a leaf that never receives gradient (targets, latents).
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push_full(Op::Input, value, false, None)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    // ----- recorded ops -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = kernels::scale(self.value(a), s);
        self.push(Op::Scale(a.0, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = kernels::add_scalar(self.value(a), s);
        self.push(Op::AddScalar(a.0), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = kernels::abs(self.value(a));
        self.push(Op::Abs(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = kernels::sqrt(self.value(a))?;
        Ok(self.push(Op::Sqrt(a.0), v))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = kernels::leaky_relu(self.value(a), slope);
        self.push(Op::LeakyRelu(a.0, slope), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = kernels::clamp(self.value(a), lo, hi)?;
        Ok(self.push(Op::Clamp(a.0, lo, hi), v))
    }

    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = kernels::add_row(self.value(x), self.value(v))?;
        Ok(self.push(Op::AddRow(x.0, v.0), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b), self.precision)?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        // Keep the unfolded input around iff the weight gradient will need it.
        let want_col = self.ng(w.0);
        let (v, col) = kernels::conv2d_and_col(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            self.precision,
            want_col,
        )?;
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            stride,
            pad,
        };
        let needs_grad = self.op_needs_grad(&op);
        Ok(self.push_full(op, v, needs_grad, col))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let v = kernels::conv2d_transpose(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            self.precision,
        )?;
        Ok(self.push(
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            v,
        ))
    }

    pub fn channel_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = kernels::channel_affine(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            Op::ChannelAffine {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            v,
        ))
    }

    pub fn scale_shift(&mut self, x: Var, ss: Var) -> Result<Var> {
        let v = kernels::scale_shift(self.value(x), self.value(ss))?;
        Ok(self.push(Op::ScaleShift { x: x.0, ss: ss.0 }, v))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCh(a.0, b.0), v))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = kernels::channel_mean(self.value(x))?;
        Ok(self.push(Op::ChannelMean(x.0), v))
    }

    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let v = kernels::channel_std(self.value(x))?;
        Ok(self.push(Op::ChannelStd(x.0), v))
    }

    pub fn concat_vecs(&mut self, parts: &[Var]) -> Result<Var> {
        let arrays: Vec<&NdArray> = parts.iter().map(|p| self.value(*p)).collect();
        let v = kernels::concat_vecs(&arrays)?;
        Ok(self.push(Op::ConcatVecs(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = kernels::reshape(self.value(a), shape)?;
        Ok(self.push(Op::Reshape(a.0), v))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = kernels::mean_all(self.value(a))?;
        Ok(self.push(Op::MeanAll(a.0), v))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = kernels::sum_all(self.value(a));
        self.push(Op::SumAll(a.0), v)
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::cosine_sim(self.value(a), self.value(b))?;
        Ok(self.push(Op::CosineSim(a.0, b.0), v))
    }

    // ----- backward -----

    /// Replay the tape in reverse from a scalar loss node.
    fn backward(&self, loss: Var) -> Result<Vec<Option<NdArray>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, dy: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        let ng = |j: usize| self.nodes[j].needs_grad;
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    acc(&mut grads[*a], dy.clone());
                }
                if ng(*b) {
                    acc(&mut grads[*b], dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    acc(&mut grads[*a], dy.clone());
                }
                if ng(*b) {
                    acc(&mut grads[*b], kernels::scale(dy, -1.0));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(&mut grads[*a], kernels::mul(dy, val(*b))?);
                }
                if ng(*b) {
                    acc(&mut grads[*b], kernels::mul(dy, val(*a))?);
                }
            }
            Op::Scale(a, s) => {
                if ng(*a) {
                    acc(&mut grads[*a], kernels::scale(dy, *s));
                }
            }
            Op::AddScalar(a) => {
                if ng(*a) {
                    acc(&mut grads[*a], dy.clone());
                }
            }
            Op::Abs(a) => {
                if !ng(*a) {
                    return Ok(());
                }
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| {
                        if xv > 0.0 {
                            g
                        } else if xv < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(&mut grads[*a], NdArray::from_parts(x.shape().to_vec(), d));
            }
            Op::Sqrt(a) => {
                if !ng(*a) {
                    return Ok(());
                }
                // Subgradient 0 at the origin keeps std of constant images finite.
                let y = val(i);
                let d = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&yv, &g)| if yv > 0.0 { g / (2.0 * yv) } else { 0.0 })
                    .collect();
                acc(&mut grads[*a], NdArray::from_parts(y.shape().to_vec(), d));
            }
            Op::LeakyRelu(a, slope) => {
                if !ng(*a) {
                    return Ok(());
                }
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv >= 0.0 { g } else { slope * g })
                    .collect();
                acc(&mut grads[*a], NdArray::from_parts(x.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                if !ng(*a) {
                    return Ok(());
                }
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv >= *lo && xv <= *hi { g } else { 0.0 })
                    .collect();
                acc(&mut grads[*a], NdArray::from_parts(x.shape().to_vec(), d));
            }
            Op::AddRow(x, v) => {
                if ng(*x) {
                    acc(&mut grads[*x], dy.clone());
                }
                if ng(*v) {
                    let cols = val(*v).len();
                    let rows = val(*x).len() / cols;
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for (ci, d) in dv.iter_mut().enumerate() {
                            *d += dy.data()[r * cols + ci];
                        }
                    }
                    acc(&mut grads[*v], NdArray::from_parts(vec![cols], dv));
                }
            }
            Op::MatMul(a, b) => {
                if ng(*a) {
                    let da = kernels::matmul_t(dy, false, val(*b), true, self.precision)?;
                    acc(&mut grads[*a], da);
                }
                if ng(*b) {
                    let db = kernels::matmul_t(val(*a), true, dy, false, self.precision)?;
                    acc(&mut grads[*b], db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = kernels::conv2d_grads(
                    val(*x),
                    val(*w),
                    dy,
                    *stride,
                    *pad,
                    self.precision,
                    self.nodes[i].aux.as_ref(),
                    ng(*x),
                    ng(*w),
                )?;
                if let Some(dx) = dx {
                    acc(&mut grads[*x], dx);
                }
                if let Some(dw) = dw {
                    acc(&mut grads[*w], dw);
                }
                if ng(*b) {
                    acc(&mut grads[*b], db);
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = kernels::conv2d_transpose_grads(
                    val(*x),
                    val(*w),
                    dy,
                    *stride,
                    *pad,
                    self.precision,
                    ng(*x),
                    ng(*w),
                )?;
                if let Some(dx) = dx {
                    acc(&mut grads[*x], dx);
                }
                if let Some(dw) = dw {
                    acc(&mut grads[*w], dw);
                }
                if ng(*b) {
                    acc(&mut grads[*b], db);
                }
            }
            Op::ChannelAffine { x, gain, bias } => {
                if !(ng(*x) || ng(*gain) || ng(*bias)) {
                    return Ok(());
                }
                let xv = val(*x);
                let gv = val(*gain);
                let (c, nb, h, w, _) = kernels::img_dims(xv, "channel_affine grad")?;
                let block = nb * h * w;
                let mut dx = vec![0.0; c * block];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ci in 0..c {
                    let gc = gv.data()[ci];
                    for k in 0..block {
                        let g = dy.data()[ci * block + k];
                        dx[ci * block + k] = g * gc;
                        dg[ci] += g * xv.data()[ci * block + k];
                        db[ci] += g;
                    }
                }
                if ng(*x) {
                    acc(&mut grads[*x], NdArray::from_parts(xv.shape().to_vec(), dx));
                }
                if ng(*gain) {
                    acc(&mut grads[*gain], NdArray::from_parts(vec![c], dg));
                }
                if ng(*bias) {
                    acc(&mut grads[*bias], NdArray::from_parts(vec![c], db));
                }
            }
            Op::ScaleShift { x, ss } => {
                if !(ng(*x) || ng(*ss)) {
                    return Ok(());
                }
                let xv = val(*x);
                let sv = val(*ss);
                let (c, nb, h, w, _) = kernels::img_dims(xv, "scale_shift grad")?;
                let hw = h * w;
                let mut dx = vec![0.0; c * nb * hw];
                let mut dss = vec![0.0; sv.len()];
                for ci in 0..c {
                    for bi in 0..nb {
                        let row = if sv.len() == 2 * c { 0 } else { bi * 2 * c };
                        let sc = 1.0 + sv.data()[row + ci];
                        let off = (ci * nb + bi) * hw;
                        for k in 0..hw {
                            let g = dy.data()[off + k];
                            dx[off + k] = g * sc;
                            dss[row + ci] += g * xv.data()[off + k];
                            dss[row + c + ci] += g;
                        }
                    }
                }
                if ng(*x) {
                    acc(&mut grads[*x], NdArray::from_parts(xv.shape().to_vec(), dx));
                }
                if ng(*ss) {
                    acc(&mut grads[*ss], NdArray::from_parts(sv.shape().to_vec(), dss));
                }
            }
            Op::ConcatCh(a, b) => {
                let (na, nb) = (val(*a).len(), val(*b).len());
                if ng(*a) {
                    let da =
                        NdArray::from_parts(val(*a).shape().to_vec(), dy.data()[..na].to_vec());
                    acc(&mut grads[*a], da);
                }
                if ng(*b) {
                    let db = NdArray::from_parts(
                        val(*b).shape().to_vec(),
                        dy.data()[na..na + nb].to_vec(),
                    );
                    acc(&mut grads[*b], db);
                }
            }
            Op::ChannelMean(x) => {
                if !ng(*x) {
                    return Ok(());
                }
                let xv = val(*x);
                let (c, h, w) = kernels::chw(xv, "channel_mean grad")?;
                let hw = h * w;
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    let g = dy.data()[ci] / hw as f64;
                    for v in &mut dx[ci * hw..(ci + 1) * hw] {
                        *v = g;
                    }
                }
                acc(&mut grads[*x], NdArray::from_parts(vec![c, h, w], dx));
            }
            Op::ChannelStd(x) => {
                if !ng(*x) {
                    return Ok(());
                }
                let xv = val(*x);
                let sd = val(i);
                let (c, h, w) = kernels::chw(xv, "channel_std grad")?;
                let hw = h * w;
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    let s = sd.data()[ci];
                    if s == 0.0 {
                        continue;
                    }
                    let sl = &xv.data()[ci * hw..(ci + 1) * hw];
                    let mu = sl.iter().sum::<f64>() / hw as f64;
                    let g = dy.data()[ci] / (hw as f64 * s);
                    for (k, &xvk) in sl.iter().enumerate() {
                        dx[ci * hw + k] = g * (xvk - mu);
                    }
                }
                acc(&mut grads[*x], NdArray::from_parts(vec![c, h, w], dx));
            }
            Op::ConcatVecs(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if ng(*p) {
                        let dv =
                            NdArray::from_parts(vec![n], dy.data()[off..off + n].to_vec());
                        acc(&mut grads[*p], dv);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                if ng(*a) {
                    let dv = NdArray::from_parts(val(*a).shape().to_vec(), dy.data().to_vec());
                    acc(&mut grads[*a], dv);
                }
            }
            Op::MeanAll(a) => {
                if ng(*a) {
                    let xv = val(*a);
                    let g = dy.scalar_value()? / xv.len() as f64;
                    acc(&mut grads[*a], NdArray::full(xv.shape(), g));
                }
            }
            Op::SumAll(a) => {
                if ng(*a) {
                    let xv = val(*a);
                    acc(&mut grads[*a], NdArray::full(xv.shape(), dy.scalar_value()?));
                }
            }
            Op::CosineSim(a, b) => {
                if !(ng(*a) || ng(*b)) {
                    return Ok(());
                }
                let (av, bv) = (val(*a), val(*b));
                let g = dy.scalar_value()?;
                let cos = self.nodes[i].value.scalar_value()?;
                let (na, nb) = (av.norm_l2(), bv.norm_l2());
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| g * (y / (na * nb) - cos * x / (na * na)))
                    .collect();
                let db: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| g * (x / (na * nb) - cos * y / (nb * nb)))
                    .collect();
                if ng(*a) {
                    acc(&mut grads[*a], NdArray::from_parts(av.shape().to_vec(), da));
                }
                if ng(*b) {
                    acc(&mut grads[*b], NdArray::from_parts(bv.shape().to_vec(), db));
                }
            }
        }
        Ok(())
    }

    /// Gradients of a scalar loss w.r.t. chosen vars (zeros when off-path).
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<NdArray>> {
        let mut grads = self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| match grads[v.0].take() {
                Some(g) => g,
                None => NdArray::zeros(self.value(*v).shape()),
            })
            .collect())
    }

    /// Gradients for a parameter binding, by name.
    ///
    /// In strict mode a parameter that never entered the computation is an
    /// error; otherwise it maps to a zero array.
    pub fn grad_map(&self, loss: Var, binding: &TapeBinding, strict: bool) -> Result<GradMap> {
        let mut grads = self.backward(loss)?;
        let mut entries = Vec::with_capacity(binding.vars.len());
        for (name, var) in &binding.vars {
            match grads[var.0].take() {
                Some(g) => entries.push((name.clone(), g)),
                None if strict => {
                    return Err(Error::Gradient(format!(
                        "parameter {name:?} is not on the recorded computation path"
                    )))
                }
                None => entries.push((name.clone(), NdArray::zeros(self.value(*var).shape()))),
            }
        }
        Ok(GradMap { entries })
    }

    /// Register every parameter of a set as a tape leaf.
    pub fn bind_params(&mut self, params: &ParamSet) -> TapeBinding {
        let vars = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.input(value.clone())))
            .collect();
        TapeBinding { vars }
    }
}

fn acc(slot: &mut Option<NdArray>, delta: NdArray) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Name-to-var map produced by [`Tape::bind_params`].
pub struct TapeBinding {
    vars: Vec<(String, Var)>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Ordered gradient collection keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradMap {
    entries: Vec<(String, NdArray)>,
}

impl GradMap {
    pub fn from_entries(entries: Vec<(String, NdArray)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum gradient maps with identical key order (batch reduction).
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch("gradient map arity".to_string()));
        }
        for ((na, ga), (nb, gb)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb {
                return Err(Error::ShapeMismatch(format!(
                    "gradient map keys {na:?} vs {nb:?}"
                )));
            }
            for (a, b) in ga.data_mut().iter_mut().zip(gb.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, g) in self.entries.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_square_sum() {
        // loss = sum(p ∘ p), p = [1, 2, 3]  =>  grad = [2, 4, 6]
        let mut params = ParamSet::new();
        params
            .insert("p", NdArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let binding = tape.bind_params(&params);
        let p = binding.var("p").unwrap();
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.grad_map(loss, &binding, true).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), [2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut params = ParamSet::new();
        params.insert("p", NdArray::full(&[2], 1.5)).unwrap();
        let mut tape = Tape::new();
        let binding = tape.bind_params(&params);
        let c = tape.input(NdArray::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        let grads = tape.grad_map(loss, &binding, false).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), [0.0, 0.0]);
        assert!(tape.grad_map(loss, &binding, true).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.input(NdArray::full(&[2], 1.0));
        assert!(matches!(tape.grad(v, &[v]), Err(Error::Gradient(_))));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(p + p) => grad = 2 everywhere
        let mut tape = Tape::new();
        let p = tape.input(NdArray::full(&[3], 0.5));
        let s = tape.add(p, p).unwrap();
        let loss = tape.sum_all(s);
        let g = tape.grad(loss, &[p]).unwrap();
        assert_eq!(g[0].data(), [2.0, 2.0, 2.0]);
    }
}
