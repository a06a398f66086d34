//! Dense n-dimensional array arithmetic with reverse-mode autodiff and Adam.
//!
//! Values are contiguous 64-bit reals. Convolution and matrix-product kernels
//! optionally run their inner GEMM at 32 bits ([`Precision::Reduced`]) for
//! training throughput; the verification suites always run at full precision.

mod adam;
mod ctx;
pub mod gradcheck;
mod kernels;
pub mod random;
mod tape;

pub use adam::{adam_step, AdamState};
pub use ctx::{Ctx, Eager, Taped};
pub use kernels::conv_out_side;
pub use kernels::stack_cbhw as stack_images;
pub use tape::{GradMap, Tape, TapeBinding, Var};

use crate::error::{Error, Result};

/// GEMM precision for convolution and matrix-product kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 64-bit accumulation everywhere. Mandatory for gradient checks.
    #[default]
    Full,
    /// 32-bit GEMM with 64-bit storage. Permitted for training loops.
    Reduced,
}

/// Dense array: a shape and a contiguous row-major `f64` buffer.
///
/// Invariants: `product(shape) == data.len()` and every element is finite.
/// Values are immutable once produced; kernels build fresh buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    /// Validating constructor: checks the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("NdArray::new".into()));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs with known-good shapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    /// A 0-dimensional array holding one value.
    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a 0-dimensional array.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Round every value to the nearest `f32`, kept in `f64` storage.
    ///
    /// Training state passes through this after every optimizer step so that
    /// the 32-bit on-disk encoding round-trips bit-exactly.
    pub fn quantized_f32(&self) -> NdArray {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Self::from_parts(self.shape.clone(), data)
    }

    /// Euclidean norm of the flattened data.
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Relative L2 distance ‖a−b‖/max(‖b‖, tiny).
    pub fn rel_l2(&self, other: &NdArray) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        num / other.norm_l2().max(1e-300)
    }
}

pub(crate) fn check_same_shape(a: &NdArray, b: &NdArray, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Ordered, uniquely named collection of trainable arrays.
///
/// Insertion order is the canonical order; it is preserved across save/load
/// so optimizer state stays aligned with its parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, NdArray)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: NdArray) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total element count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn quantize_f32(&mut self) {
        for (_, v) in self.entries.iter_mut() {
            *v = v.quantized_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndarray_shape_contract() {
        assert!(NdArray::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            NdArray::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ndarray_rejects_non_finite() {
        assert!(matches!(
            NdArray::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            NdArray::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn scalar_roundtrip() {
        let s = NdArray::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 3.5);
        assert!(NdArray::zeros(&[2]).scalar_value().is_err());
    }

    #[test]
    fn paramset_rejects_duplicates_and_keeps_order() {
        let mut p = ParamSet::new();
        p.insert("b", NdArray::zeros(&[1])).unwrap();
        p.insert("a", NdArray::zeros(&[1])).unwrap();
        assert!(p.insert("b", NdArray::zeros(&[1])).is_err());
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn quantize_is_idempotent() {
        let a = NdArray::new(vec![3], vec![0.1, -0.3, 1.0 / 3.0]).unwrap();
        let q = a.quantized_f32();
        assert_eq!(q, q.quantized_f32());
    }
}
