//! Dense-array substrate: shaped row-major `f64` arrays plus the handful of
//! reductions everything else is built from (stable softmax, argmax with
//! lowest-index tie-breaking, top-2 values).
//!
//! All public operations keep the "no NaN/Inf" invariant: they reject
//! non-finite inputs and produce finite outputs.

use crate::error::{Error, Result};

/// Shaped, contiguous, row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    /// Builds an array after checking shape/length consistency and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("array constructed from non-finite data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Length of the last axis (0 for a rank-0 array).
    pub fn last_axis(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Number of last-axis rows, i.e. product of all leading dimensions.
    pub fn num_rows(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Iterates over contiguous last-axis rows.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let k = self.last_axis().max(1);
        self.data.chunks_exact(k)
    }

    /// Flat index for a 3-d array indexed as `[i, j, k]`.
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx3(i, j, k)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Softmax over the last axis at the given temperature, computed with
/// max-subtraction so extreme logits cannot overflow.
pub fn softmax(a: &RealArray, temperature: f64) -> Result<RealArray> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if a.last_axis() == 0 {
        return Err(Error::ShapeMismatch("softmax over an empty last axis".into()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("softmax input contains NaN/Inf".into()));
    }
    let k = a.last_axis();
    let mut out = vec![0.0; a.len()];
    for (row_idx, row) in a.rows().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[row_idx * k..(row_idx + 1) * k];
        let mut sum = 0.0;
        for (dst, &x) in o.iter_mut().zip(row) {
            *dst = ((x - max) / temperature).exp();
            sum += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= sum;
        }
    }
    RealArray::from_vec(a.shape().to_vec(), out)
}

/// Per-row index of the maximum along the last axis; ties break to the
/// lowest index so results are reproducible.
pub fn argmax_lastaxis(a: &RealArray) -> Result<Vec<usize>> {
    if a.last_axis() == 0 {
        return Err(Error::ShapeMismatch("argmax over an empty last axis".into()));
    }
    Ok(a.rows().map(argmax_slice).collect())
}

/// Lowest-index argmax of one slice.
#[inline]
pub fn argmax_slice(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row (largest, second-largest) values along the last axis.
/// Duplicated maxima yield equal values.
pub fn top2_lastaxis(a: &RealArray) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.last_axis() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "top2 needs a last axis of length >= 2, got {}",
            a.last_axis()
        )));
    }
    let mut v1 = Vec::with_capacity(a.num_rows());
    let mut v2 = Vec::with_capacity(a.num_rows());
    for row in a.rows() {
        let (a1, a2) = top2_slice(row);
        v1.push(a1);
        v2.push(a2);
    }
    Ok((v1, v2))
}

/// (largest, second-largest) of one slice with at least two entries.
#[inline]
pub fn top2_slice(row: &[f64]) -> (f64, f64) {
    let mut first = row[0];
    let mut second = f64::NEG_INFINITY;
    for &x in &row[1..] {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    (first, second)
}
