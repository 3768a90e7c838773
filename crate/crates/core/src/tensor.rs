//! Quantized tensors and weight sign matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric per-tensor i8 tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    dims: Vec<usize>,
    data: Vec<i8>,
    scale: f64,
}

/// Round half away from zero, then clamp into the i8 range.
pub fn quantize_scalar(value: f64, scale: f64) -> i8 {
    let q = (value / scale).round();
    q.clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

/// Quantize real values with a positive step `scale`.
///
/// Values that land outside `[-128, 127]` saturate; this clamp is the
/// re-quantization saturation mechanism the resilience studies rely on.
pub fn quantize(values: &[f64], dims: &[usize], scale: f64) -> Result<QuantTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "quantization scale must be positive, got {scale}"
        )));
    }
    let data = values.iter().map(|&v| quantize_scalar(v, scale)).collect();
    QuantTensor::new(dims.to_vec(), data, scale)
}

impl QuantTensor {
    pub fn new(dims: Vec<usize>, data: Vec<i8>, scale: f64) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data has {} elements but dims {:?} need {}",
                data.len(),
                dims,
                expected
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("tensor scale must be positive, got {scale}")));
        }
        Ok(Self { dims, data, scale })
    }

    pub fn zeros(dims: Vec<usize>, scale: f64) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0; n], scale)
    }

    pub fn from_fn(rows: usize, cols: usize, scale: f64, mut f: impl FnMut(usize, usize) -> i8) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            dims: vec![rows, cols],
            data,
            scale,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| q as f64 * self.scale).collect()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            d => Err(Error::invalid(format!("expected a 2-D tensor, got dims {d:?}"))),
        }
    }

    /// Element `(r, c)` of a 2-D tensor; panics on out-of-range indices.
    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.dims[1] + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        let cols = self.dims[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Rows `indices` of a 2-D tensor, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.shape2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(Error::invalid(format!("row index {r} out of range for {rows} rows")));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(vec![indices.len(), cols], data, self.scale)
    }

    pub fn neg(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v.saturating_neg()).collect(),
            scale: self.scale,
        }
    }
}

/// Wide (i32) accumulator outputs, the observation point for checksums and
/// fault injection. `scale` is the product of the operand scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideTensor {
    dims: Vec<usize>,
    data: Vec<i32>,
    scale: f64,
}

impl WideTensor {
    pub fn new(dims: Vec<usize>, data: Vec<i32>, scale: f64) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data has {} elements but dims {:?} need {}",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Self { dims, data, scale })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            d => Err(Error::invalid(format!("expected a 2-D tensor, got dims {d:?}"))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.dims[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i32) {
        let cols = self.dims[1];
        self.data[r * cols + c] = v;
    }

    /// Re-quantize into i8 with output step `out_scale` (round, then clamp).
    pub fn requantize(&self, out_scale: f64) -> Result<QuantTensor> {
        let ratio = self.scale / out_scale;
        let data = self
            .data
            .iter()
            .map(|&v| quantize_scalar(v as f64 * ratio, 1.0))
            .collect();
        QuantTensor::new(self.dims.clone(), data, out_scale)
    }
}

/// Exact integer GEMM `w [m × n] · x [n × k]`.
///
/// Exact for reductions below 131 072 terms, where every i32 partial sum
/// stays in range; longer reductions accumulate in i64 and wrap to i32.
pub fn gemm(w: &QuantTensor, x: &QuantTensor) -> Result<WideTensor> {
    let (m, n) = w.shape2()?;
    let (n2, k) = x.shape2()?;
    if n != n2 {
        return Err(Error::invalid(format!(
            "inner dimensions differ: weights {m}x{n}, activations {n2}x{k}"
        )));
    }
    let mut out = vec![0i32; m * k];
    // |w·x| <= 2^14 per product, so i32 rows are exact below 2^17 terms.
    if n < 1 << 17 {
        for (i, orow) in out.chunks_mut(k.max(1)).enumerate().take(m) {
            for (t, &wv) in w.row(i).iter().enumerate() {
                let wv = wv as i32;
                for (o, &xv) in orow.iter_mut().zip(&x.data[t * k..(t + 1) * k]) {
                    *o += wv * xv as i32;
                }
            }
        }
    } else {
        for i in 0..m {
            let wrow = w.row(i);
            for j in 0..k {
                let mut acc = 0i64;
                for (t, &wv) in wrow.iter().enumerate() {
                    acc += wv as i64 * x.data[t * k + j] as i64;
                }
                out[i * k + j] = acc as i32;
            }
        }
    }
    WideTensor::new(vec![m, k], out, w.scale * x.scale)
}

/// Elementwise sign of a 2-D weight tensor, zero counted as positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    signs: Vec<i8>,
}

pub fn sign_matrix(w: &QuantTensor) -> Result<SignMatrix> {
    let (rows, cols) = w.shape2()?;
    let signs = w.data().iter().map(|&v| if v >= 0 { 1 } else { -1 }).collect();
    Ok(SignMatrix { rows, cols, signs })
}

impl SignMatrix {
    pub fn from_signs(rows: usize, cols: usize, signs: Vec<i8>) -> Result<Self> {
        if signs.len() != rows * cols {
            return Err(Error::invalid("sign matrix length does not match shape"));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("sign entries must be +1 or -1"));
        }
        Ok(Self { rows, cols, signs })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.signs[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.signs[r * self.cols + c]
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn neg(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            signs: self.signs.iter().map(|&s| -s).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::SeededStream;
    use proptest::prelude::*;

    #[test]
    fn quantize_zero() {
        let q = quantize(&[0.0], &[1], 0.1).unwrap();
        assert_eq!(q.data(), &[0]);
    }

    #[test]
    fn quantize_saturates_at_127() {
        let q = quantize(&[12.77], &[1], 0.1).unwrap();
        assert_eq!(q.data(), &[127]);
    }

    #[test]
    fn quantize_rounds_half_away() {
        // -3.16/0.05 = -63.2 -> -63; 2.5/0.05 = 50
        let q = quantize(&[-3.16, 2.5], &[2], 0.05).unwrap();
        assert_eq!(q.data(), &[-63, 50]);
        let q = quantize(&[1.25, -1.25, 0.875, 1.75], &[4], 0.5).unwrap();
        // 2.5 -> 3, -2.5 -> -3, 1.75 -> 2, 3.5 -> 4 (away from zero, not banker's)
        assert_eq!(q.data(), &[3, -3, 2, 4]);
    }

    #[test]
    fn quantize_rejects_bad_scale() {
        assert!(matches!(quantize(&[1.0], &[1], 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(quantize(&[1.0], &[1], -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dims_must_match_data() {
        assert!(QuantTensor::new(vec![2, 3], vec![0; 5], 1.0).is_err());
    }

    #[test]
    fn sign_matrix_zero_is_plus() {
        let w = QuantTensor::new(vec![2, 2], vec![0; 4], 1.0).unwrap();
        assert_eq!(sign_matrix(&w).unwrap().signs(), &[1, 1, 1, 1]);
    }

    #[test]
    fn sign_matrix_direct() {
        let w = QuantTensor::new(vec![2, 2], vec![3, -2, -1, 0], 1.0).unwrap();
        assert_eq!(sign_matrix(&w).unwrap().signs(), &[1, -1, -1, 1]);
    }

    #[test]
    fn sign_matrix_requires_2d() {
        let w = QuantTensor::new(vec![2, 2, 1], vec![0; 4], 1.0).unwrap();
        assert!(matches!(sign_matrix(&w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sign_matrix_matches_scalar_oracle() {
        let mut s = SeededStream::new(11);
        let w = QuantTensor::from_fn(16, 16, 1.0, |_, _| s.next_range_i64(-128, 127) as i8);
        let sm = sign_matrix(&w).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let oracle = if (w.at(r, c) as i32) < 0 { -1 } else { 1 };
                assert_eq!(sm.at(r, c), oracle);
            }
        }
    }

    #[test]
    fn requantize_clamps() {
        let y = WideTensor::new(vec![1, 3], vec![1000, -1000, 10], 1.0).unwrap();
        let q = y.requantize(2.0).unwrap();
        assert_eq!(q.data(), &[127, -128, 5]);
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded(v in -12.7f64..12.7, scale in 0.01f64..1.0) {
            let q = quantize(&[v], &[1], scale).unwrap();
            let back = q.dequantize()[0];
            let lo = -128.0 * scale;
            let hi = 127.0 * scale;
            if v >= lo && v <= hi {
                prop_assert!((back - v).abs() <= scale / 2.0 + 1e-12);
            } else {
                prop_assert_eq!(back, if v > hi { hi } else { lo });
            }
        }

        #[test]
        fn sign_matrix_negation(vals in proptest::collection::vec(prop_oneof![1i8..=127, -127i8..=-1], 12)) {
            let w = QuantTensor::new(vec![3, 4], vals, 1.0).unwrap();
            prop_assert_eq!(sign_matrix(&w.neg()).unwrap(), sign_matrix(&w).unwrap().neg());
        }
    }
}
