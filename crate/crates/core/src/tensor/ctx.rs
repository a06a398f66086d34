//! Evaluation context abstracting eager kernels and tape recording, so model
//! and loss code is written once and runs both ways.

use super::{kernels, NdArray, Precision, Tape, Var};
use crate::error::Result;

pub trait Ctx {
    type V: Clone;

    fn constant(&mut self, a: NdArray) -> Self::V;
    fn dims(&self, v: &Self::V) -> Vec<usize>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn abs(&mut self, a: &Self::V) -> Self::V;
    fn sqrt(&mut self, a: &Self::V) -> Result<Self::V>;
    fn leaky_relu(&mut self, a: &Self::V, slope: f64) -> Self::V;
    fn clamp(&mut self, a: &Self::V, lo: f64, hi: f64) -> Result<Self::V>;
    fn add_row(&mut self, x: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        stride: usize,
        pad: usize,
    ) -> Result<Self::V>;
    fn conv2d_transpose(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        stride: usize,
        pad: usize,
    ) -> Result<Self::V>;
    fn channel_affine(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn scale_shift(&mut self, x: &Self::V, ss: &Self::V) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn channel_mean(&mut self, x: &Self::V) -> Result<Self::V>;
    fn channel_std(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat_vecs(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn mean_all(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sum_all(&mut self, a: &Self::V) -> Self::V;
    fn cosine_sim(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Direct kernel evaluation; values are plain arrays.
#[derive(Default)]
pub struct Eager {
    precision: Precision,
}

impl Eager {
    pub fn new() -> Self {
        Self {
            precision: Precision::Full,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { precision }
    }
}

impl Ctx for Eager {
    type V = NdArray;

    fn constant(&mut self, a: NdArray) -> NdArray {
        a
    }

    fn dims(&self, v: &NdArray) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::sub(a, b)
    }

    fn mul(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::mul(a, b)
    }

    fn scale(&mut self, a: &NdArray, s: f64) -> NdArray {
        kernels::scale(a, s)
    }

    fn add_scalar(&mut self, a: &NdArray, s: f64) -> NdArray {
        kernels::add_scalar(a, s)
    }

    fn abs(&mut self, a: &NdArray) -> NdArray {
        kernels::abs(a)
    }

    fn sqrt(&mut self, a: &NdArray) -> Result<NdArray> {
        kernels::sqrt(a)
    }

    fn leaky_relu(&mut self, a: &NdArray, slope: f64) -> NdArray {
        kernels::leaky_relu(a, slope)
    }

    fn clamp(&mut self, a: &NdArray, lo: f64, hi: f64) -> Result<NdArray> {
        kernels::clamp(a, lo, hi)
    }

    fn add_row(&mut self, x: &NdArray, v: &NdArray) -> Result<NdArray> {
        kernels::add_row(x, v)
    }

    fn matmul(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::matmul(a, b, self.precision)
    }

    fn conv2d(
        &mut self,
        x: &NdArray,
        w: &NdArray,
        b: &NdArray,
        stride: usize,
        pad: usize,
    ) -> Result<NdArray> {
        kernels::conv2d(x, w, b, stride, pad, self.precision)
    }

    fn conv2d_transpose(
        &mut self,
        x: &NdArray,
        w: &NdArray,
        b: &NdArray,
        stride: usize,
        pad: usize,
    ) -> Result<NdArray> {
        kernels::conv2d_transpose(x, w, b, stride, pad, self.precision)
    }

    fn channel_affine(&mut self, x: &NdArray, gain: &NdArray, bias: &NdArray) -> Result<NdArray> {
        kernels::channel_affine(x, gain, bias)
    }

    fn scale_shift(&mut self, x: &NdArray, ss: &NdArray) -> Result<NdArray> {
        kernels::scale_shift(x, ss)
    }

    fn concat_channels(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::concat_channels(a, b)
    }

    fn channel_mean(&mut self, x: &NdArray) -> Result<NdArray> {
        kernels::channel_mean(x)
    }

    fn channel_std(&mut self, x: &NdArray) -> Result<NdArray> {
        kernels::channel_std(x)
    }

    fn concat_vecs(&mut self, parts: &[NdArray]) -> Result<NdArray> {
        let refs: Vec<&NdArray> = parts.iter().collect();
        kernels::concat_vecs(&refs)
    }

    fn reshape(&mut self, a: &NdArray, shape: &[usize]) -> Result<NdArray> {
        kernels::reshape(a, shape)
    }

    fn mean_all(&mut self, a: &NdArray) -> Result<NdArray> {
        kernels::mean_all(a)
    }

    fn sum_all(&mut self, a: &NdArray) -> NdArray {
        kernels::sum_all(a)
    }

    fn cosine_sim(&mut self, a: &NdArray, b: &NdArray) -> Result<NdArray> {
        kernels::cosine_sim(a, b)
    }
}

/// Recording evaluation on a borrowed tape; values are tape vars.
pub struct Taped<'t> {
    pub tape: &'t mut Tape,
}

impl<'t> Taped<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self { tape }
    }
}

impl Ctx for Taped<'_> {
    type V = Var;

    fn constant(&mut self, a: NdArray) -> Var {
        self.tape.constant(a)
    }

    fn dims(&self, v: &Var) -> Vec<usize> {
        self.tape.value(*v).shape().to_vec()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.sub(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.mul(*a, *b)
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        self.tape.scale(*a, s)
    }

    fn add_scalar(&mut self, a: &Var, s: f64) -> Var {
        self.tape.add_scalar(*a, s)
    }

    fn abs(&mut self, a: &Var) -> Var {
        self.tape.abs(*a)
    }

    fn sqrt(&mut self, a: &Var) -> Result<Var> {
        self.tape.sqrt(*a)
    }

    fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        self.tape.leaky_relu(*a, slope)
    }

    fn clamp(&mut self, a: &Var, lo: f64, hi: f64) -> Result<Var> {
        self.tape.clamp(*a, lo, hi)
    }

    fn add_row(&mut self, x: &Var, v: &Var) -> Result<Var> {
        self.tape.add_row(*x, *v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.tape.conv2d(*x, *w, *b, stride, pad)
    }

    fn conv2d_transpose(
        &mut self,
        x: &Var,
        w: &Var,
        b: &Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.tape.conv2d_transpose(*x, *w, *b, stride, pad)
    }

    fn channel_affine(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        self.tape.channel_affine(*x, *gain, *bias)
    }

    fn scale_shift(&mut self, x: &Var, ss: &Var) -> Result<Var> {
        self.tape.scale_shift(*x, *ss)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(*a, *b)
    }

    fn channel_mean(&mut self, x: &Var) -> Result<Var> {
        self.tape.channel_mean(*x)
    }

    fn channel_std(&mut self, x: &Var) -> Result<Var> {
        self.tape.channel_std(*x)
    }

    fn concat_vecs(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_vecs(parts)
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        self.tape.reshape(*a, shape)
    }

    fn mean_all(&mut self, a: &Var) -> Result<Var> {
        self.tape.mean_all(*a)
    }

    fn sum_all(&mut self, a: &Var) -> Var {
        self.tape.sum_all(*a)
    }

    fn cosine_sim(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.cosine_sim(*a, *b)
    }
}
