//! Rank-4 tensor container and the flat parameter vector.
//!
//! Layout is dense row-major over `(batch, channel, height, width)`:
//! element `(b, ch, y, x)` lives at `data[((b*c + ch)*h + y)*w + x]`.
//! There is no broadcasting; every shape mismatch is an error.

use crate::error::{Result, SegError};

/// Dense rank-4 array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    /// Tensor of the given dims with every element set to `value`.
    pub fn full(dims: [usize; 4], value: f64) -> Tensor4 {
        let len = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![value; len],
        }
    }

    pub fn zeros(dims: [usize; 4]) -> Tensor4 {
        Tensor4::full(dims, 0.0)
    }

    /// Wraps an existing buffer. The buffer length must equal the dim product.
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Tensor4> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(SegError::Corrupt(format!(
                "buffer of {} elements cannot hold dims {:?} ({} elements)",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.dims[0] && ch < self.dims[1] && y < self.dims[2] && x < self.dims[3]);
        ((b * self.dims[1] + ch) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, ch, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, ch: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.offset(b, ch, y, x);
        &mut self.data[i]
    }

    /// The contiguous `h*w` slice holding one channel of one batch item.
    #[inline]
    pub fn plane(&self, b: usize, ch: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + ch) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, ch: usize) -> &mut [f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + ch) * hw;
        &mut self.data[start..start + hw]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical dims.
    pub fn zip_with(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(SegError::shape("zip", self.dims, other.dims));
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum over all elements, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Maximum element; NaN-free inputs assumed. Empty tensor yields -inf.
    pub fn max_val(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }
}

/// One named region of a [`FlatVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub id: String,
    pub dims: [usize; 4],
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter tensors concatenated into one dense vector, with the layout
/// needed to reassemble them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    pub data: Vec<f64>,
    pub layout: Vec<Slot>,
}

impl FlatVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Layouts must match exactly for two flat vectors to be interchangeable.
    pub fn same_layout(&self, other: &FlatVector) -> bool {
        self.layout == other.layout
    }
}

/// Concatenates tensors into a flat vector. Slot ids are the list positions.
pub fn flatten(params: &[Tensor4]) -> FlatVector {
    flatten_named(params.iter().enumerate().map(|(i, t)| (i.to_string(), t)))
}

/// Concatenates named tensors; the iteration order fixes the layout order.
pub fn flatten_named<'a>(params: impl IntoIterator<Item = (String, &'a Tensor4)>) -> FlatVector {
    let mut data = Vec::new();
    let mut layout = Vec::new();
    for (id, t) in params {
        layout.push(Slot {
            id,
            dims: t.dims(),
            offset: data.len(),
        });
        data.extend_from_slice(t.data());
    }
    FlatVector { data, layout }
}

/// Splits a flat vector back into the tensors it was built from.
pub fn unflatten(v: &FlatVector) -> Result<Vec<Tensor4>> {
    let total: usize = v.layout.iter().map(Slot::len).sum();
    if total != v.data.len() {
        return Err(SegError::Corrupt(format!(
            "flat vector holds {} elements but layout describes {}",
            v.data.len(),
            total
        )));
    }
    let mut out = Vec::with_capacity(v.layout.len());
    for slot in &v.layout {
        let end = slot.offset + slot.len();
        if end > v.data.len() {
            return Err(SegError::Corrupt(format!(
                "slot {} spans {}..{} beyond data length {}",
                slot.id,
                slot.offset,
                end,
                v.data.len()
            )));
        }
        out.push(Tensor4::from_vec(
            slot.dims,
            v.data[slot.offset..end].to_vec(),
        )?);
    }
    Ok(out)
}

/// `dst += a * src`, elementwise. Slices must have equal length.
#[inline]
pub(crate) fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

/// Dot product with a fixed four-lane accumulation tree, so the result is
/// identical across runs and platforms with the same FP hardware.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
