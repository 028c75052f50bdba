//! Dense row-major tensors and axis decomposition.
//!
//! Every tensor is viewed around an axis as `[outer, extent, inner]`, where
//! `outer` is the product of the leading extents and `inner` the product of
//! the trailing ones. Decomposition, reassembly and position flattening are
//! all expressed in that view so that their orderings agree.

use serde::{Deserialize, Serialize};

use crate::error::{DqError, Result};

/// Dense real tensor with an explicit shape and row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NdTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdTensor {
    /// Builds a tensor from external data, rejecting zero extents, element
    /// count mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some((index, &value)) = t.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DqError::NonFinite { index, value });
        }
        Ok(t)
    }

    /// Like [`NdTensor::new`] but without the finiteness scan. Used for
    /// internal results whose inputs were already validated.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(DqError::ZeroExtent(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(DqError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::from_parts(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// `[outer, extent, inner]` view around `axis`.
    pub fn axis_view(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(DqError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[NdTensor]) -> Result<Self> {
        let first = items.first().ok_or(DqError::Empty("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(DqError::ShapeMismatch {
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Splits along the leading axis, the inverse of [`NdTensor::stack`].
    pub fn unstack(&self) -> Vec<NdTensor> {
        let n = self.shape[0];
        let rest = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        let chunk = self.len() / n;
        self.data
            .chunks(chunk)
            .map(|c| NdTensor {
                shape: rest.clone(),
                data: c.to_vec(),
            })
            .collect()
    }
}

/// Record of how a tensor was cut into slices along one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisDecomposition {
    pub axis: usize,
    pub num_slices: usize,
    /// Extent `D` of every slice along `axis`.
    pub slice_extent: usize,
    /// Zero rows appended to the final slice.
    pub pad: usize,
    pub original_shape: Vec<usize>,
}

impl AxisDecomposition {
    /// Plans the decomposition of `shape` along `axis` into `num_slices`
    /// slices of extent `ceil(extent / num_slices)`.
    pub fn plan(shape: &[usize], axis: usize, num_slices: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(DqError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        if num_slices == 0 || num_slices > extent {
            return Err(DqError::InvalidDecomposition {
                extent,
                slices: num_slices,
            });
        }
        let slice_extent = extent.div_ceil(num_slices);
        let pad = slice_extent * num_slices - extent;
        // With ceil slicing the padding can swallow a whole slice, e.g. 5
        // rows into 4 slices of 2. Such a split leaves a slice of pure zeros.
        if pad >= slice_extent {
            return Err(DqError::InvalidDecomposition {
                extent,
                slices: num_slices,
            });
        }
        Ok(Self {
            axis,
            num_slices,
            slice_extent,
            pad,
            original_shape: shape.to_vec(),
        })
    }

    pub fn original_extent(&self) -> usize {
        self.original_shape[self.axis]
    }

    /// Shape shared by every slice.
    pub fn slice_shape(&self) -> Vec<usize> {
        let mut s = self.original_shape.clone();
        s[self.axis] = self.slice_extent;
        s
    }

    /// True when row `offset` of slice `slice` is zero padding.
    pub fn is_padding(&self, slice: usize, offset: usize) -> bool {
        slice * self.slice_extent + offset >= self.original_extent()
    }

    /// Number of non-padding rows in slice `slice`.
    pub fn valid_extent(&self, slice: usize) -> usize {
        let start = slice * self.slice_extent;
        self.original_extent().saturating_sub(start).min(self.slice_extent)
    }

    /// Element-level mask over a slice: `true` for real data, `false` for pad.
    pub fn slice_mask(&self, slice: usize) -> Vec<bool> {
        let shape = self.slice_shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let valid = self.valid_extent(slice);
        let mut mask = Vec::with_capacity(outer * self.slice_extent * inner);
        for _ in 0..outer {
            for k in 0..self.slice_extent {
                mask.extend(std::iter::repeat_n(k < valid, inner));
            }
        }
        mask
    }
}

/// Cuts `t` along `axis` into `num_slices` equally sized slices. The final
/// slice is zero padded when the extent does not divide evenly.
pub fn decompose(t: &NdTensor, axis: usize, num_slices: usize) -> Result<(Vec<NdTensor>, AxisDecomposition)> {
    let plan = AxisDecomposition::plan(t.shape(), axis, num_slices)?;
    let (outer, extent, inner) = t.axis_view(axis)?;
    let d = plan.slice_extent;
    let slice_shape = plan.slice_shape();
    let mut slices = Vec::with_capacity(num_slices);
    for s in 0..num_slices {
        let mut data = vec![0.0; outer * d * inner];
        let valid = plan.valid_extent(s);
        for o in 0..outer {
            let src = o * extent * inner + s * d * inner;
            let dst = o * d * inner;
            data[dst..dst + valid * inner].copy_from_slice(&t.data()[src..src + valid * inner]);
        }
        slices.push(NdTensor {
            shape: slice_shape.clone(),
            data,
        });
    }
    Ok((slices, plan))
}

/// Concatenates slices along the decomposition axis and trims the padding.
pub fn reassemble(slices: &[NdTensor], plan: &AxisDecomposition) -> Result<NdTensor> {
    if slices.len() != plan.num_slices {
        return Err(DqError::DimensionMismatch {
            expected: plan.num_slices,
            actual: slices.len(),
        });
    }
    let slice_shape = plan.slice_shape();
    for s in slices {
        if s.shape() != slice_shape.as_slice() {
            return Err(DqError::ShapeMismatch {
                expected: slice_shape,
                actual: s.shape().to_vec(),
            });
        }
    }
    let axis = plan.axis;
    let outer: usize = plan.original_shape[..axis].iter().product();
    let inner: usize = plan.original_shape[axis + 1..].iter().product();
    let extent = plan.original_extent();
    let d = plan.slice_extent;
    let mut data = vec![0.0; outer * extent * inner];
    for (s, slice) in slices.iter().enumerate() {
        let valid = plan.valid_extent(s);
        for o in 0..outer {
            let dst = o * extent * inner + s * d * inner;
            let src = o * d * inner;
            data[dst..dst + valid * inner].copy_from_slice(&slice.data()[src..src + valid * inner]);
        }
    }
    Ok(NdTensor {
        shape: plan.original_shape.clone(),
        data,
    })
}

/// Flattens every position off `axis` into one row, giving a `[P, D]`
/// matrix where `D` is the extent along `axis`. Rows are ordered by
/// (leading index, trailing index) in row-major order.
pub fn positions_as_vectors(t: &NdTensor, axis: usize) -> Result<NdTensor> {
    let (outer, d, inner) = t.axis_view(axis)?;
    let mut data = vec![0.0; outer * inner * d];
    for o in 0..outer {
        let base = o * d * inner;
        for i in 0..inner {
            let row = (o * inner + i) * d;
            for k in 0..d {
                data[row + k] = t.data()[base + k * inner + i];
            }
        }
    }
    Ok(NdTensor {
        shape: vec![outer * inner, d],
        data,
    })
}

/// Inverse of [`positions_as_vectors`]: scatters `[P, D]` rows back into a
/// tensor of `shape` along `axis`.
pub fn vectors_to_positions(vectors: &NdTensor, shape: &[usize], axis: usize) -> Result<NdTensor> {
    if axis >= shape.len() {
        return Err(DqError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let d = shape[axis];
    let expected = vec![outer * inner, d];
    if vectors.shape() != expected.as_slice() {
        return Err(DqError::ShapeMismatch {
            expected,
            actual: vectors.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; outer * d * inner];
    for o in 0..outer {
        let base = o * d * inner;
        for i in 0..inner {
            let row = (o * inner + i) * d;
            for k in 0..d {
                data[base + k * inner + i] = vectors.data()[row + k];
            }
        }
    }
    NdTensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(shape: &[usize]) -> NdTensor {
        NdTensor::from_fn(shape, |i| i as f64 + 1.0)
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            NdTensor::new(vec![2, 3], vec![0.0; 5]),
            Err(DqError::ElementCount { .. })
        ));
        assert!(matches!(
            NdTensor::new(vec![2], vec![0.0, f64::NAN]),
            Err(DqError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(NdTensor::new(vec![0, 2], vec![]), Err(DqError::ZeroExtent(_))));
    }

    #[test]
    fn channel_split_of_vgg_feature_geometry() {
        let t = iota(&[512, 7, 7]);
        let (slices, plan) = decompose(&t, 0, 7).unwrap();
        assert_eq!(slices.len(), 7);
        assert_eq!(plan.slice_extent, 74);
        assert_eq!(plan.pad, 6);
        for s in &slices {
            assert_eq!(s.shape(), &[74, 7, 7]);
        }
        // pad rows of the final slice are zeros
        let last = &slices[6];
        let valid = plan.valid_extent(6);
        assert_eq!(valid, 68);
        assert!(last.data()[valid * 49..].iter().all(|&v| v == 0.0));
        assert_eq!(reassemble(&slices, &plan).unwrap(), t);
    }

    #[test]
    fn single_slice_is_identity() {
        let t = iota(&[6, 2]);
        let (slices, plan) = decompose(&t, 0, 1).unwrap();
        assert_eq!(plan.pad, 0);
        assert_eq!(slices, vec![t.clone()]);
        assert_eq!(reassemble(&slices, &plan).unwrap(), t);
    }

    #[test]
    fn uneven_split_pads_final_slice() {
        // rows: [1,2] [3,4] [5,6] [7,8] [9,10]
        let t = iota(&[5, 2]);
        let (slices, plan) = decompose(&t, 0, 2).unwrap();
        assert_eq!(plan.pad, 1);
        assert_eq!(slices[0].data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(slices[1].data(), &[7.0, 8.0, 9.0, 10.0, 0.0, 0.0]);
        let back = reassemble(&slices, &plan).unwrap();
        assert_eq!(back.shape(), &[5, 2]);
        assert_eq!(back, t);
    }

    #[test]
    fn pad_mask_marks_only_padding() {
        let plan = AxisDecomposition::plan(&[5, 2], 0, 2).unwrap();
        assert!(!plan.is_padding(1, 1));
        assert!(plan.is_padding(1, 2));
        assert_eq!(plan.slice_mask(0), vec![true; 6]);
        assert_eq!(plan.slice_mask(1), vec![true, true, true, true, false, false]);
    }

    #[test]
    fn decomposition_errors() {
        let t = iota(&[4, 3]);
        assert!(matches!(
            decompose(&t, 2, 1),
            Err(DqError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
        assert!(matches!(decompose(&t, 1, 4), Err(DqError::InvalidDecomposition { .. })));
        assert!(decompose(&t, 0, 0).is_err());
        // 5 rows into 4 slices would need a fully padded slice
        assert!(decompose(&iota(&[5]), 0, 4).is_err());
    }

    #[test]
    fn reassemble_rejects_mismatched_slices() {
        let t = iota(&[4, 3]);
        let (mut slices, plan) = decompose(&t, 0, 2).unwrap();
        slices[1] = iota(&[3, 3]);
        assert!(matches!(reassemble(&slices, &plan), Err(DqError::ShapeMismatch { .. })));
        assert!(reassemble(&slices[..1], &plan).is_err());
    }

    #[test]
    fn position_vectors_geometry() {
        let t = iota(&[74, 7, 7]);
        let v = positions_as_vectors(&t, 0).unwrap();
        assert_eq!(v.shape(), &[49, 74]);
        // row p holds the channel fiber at spatial position p
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[1], 50.0);
        assert_eq!(vectors_to_positions(&v, t.shape(), 0).unwrap(), t);

        let r1 = iota(&[5]);
        let v1 = positions_as_vectors(&r1, 0).unwrap();
        assert_eq!(v1.shape(), &[1, 5]);
        assert_eq!(v1.data(), r1.data());
    }

    #[test]
    fn stack_roundtrip() {
        let a = iota(&[2, 3]);
        let b = NdTensor::full(&[2, 3], 7.0);
        let s = NdTensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.unstack(), vec![a, b]);
    }

    fn shape_and_split() -> impl Strategy<Value = (Vec<usize>, usize, usize)> {
        prop::collection::vec(1usize..6, 1..=4).prop_flat_map(|shape| {
            let rank = shape.len();
            (Just(shape), 0..rank).prop_flat_map(|(shape, axis)| {
                let extent = shape[axis];
                (Just(shape), Just(axis), 1..=extent)
            })
        })
    }

    proptest! {
        #[test]
        fn decompose_reassemble_is_exact((shape, axis, m) in shape_and_split(), seed in any::<u64>()) {
            let t = NdTensor::from_fn(&shape, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0);
            match decompose(&t, axis, m) {
                Ok((slices, plan)) => {
                    prop_assert_eq!(plan.original_extent() + plan.pad, m * plan.slice_extent);
                    prop_assert!(plan.pad < plan.slice_extent);
                    for (s, slice) in slices.iter().enumerate() {
                        for (x, keep) in slice.data().iter().zip(plan.slice_mask(s)) {
                            if !keep { prop_assert_eq!(*x, 0.0); }
                        }
                    }
                    let back = reassemble(&slices, &plan).unwrap();
                    prop_assert_eq!(back.data(), t.data());
                }
                Err(DqError::InvalidDecomposition { .. }) => {
                    let d = shape[axis].div_ceil(m);
                    prop_assert!(d * m - shape[axis] >= d);
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn position_vectors_roundtrip((shape, axis, _m) in shape_and_split()) {
            let t = NdTensor::from_fn(&shape, |i| i as f64 * 0.5);
            let v = positions_as_vectors(&t, axis).unwrap();
            prop_assert_eq!(vectors_to_positions(&v, &shape, axis).unwrap(), t);
        }
    }
}
