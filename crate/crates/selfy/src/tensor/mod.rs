//! Dense row-major n-dimensional tensors and the numeric ops the rest of the
//! crate is built from.
//!
//! Layout is always contiguous row-major (last index fastest), so the
//! reshapes between 4D/5D/6D/7D views used elsewhere are metadata-only.
//! There is no broadcasting and no strided views; every op owns its output.

mod conv;
pub mod vten;

pub use conv::{conv3d, conv3d_fused, conv_output_extent, ConvGeom};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor rank must be >= 1".into()));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Size(format!("element count overflows for shape {shape:?}")))?;
    }
    Ok(n)
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![E::ZERO; n] })
    }

    pub fn filled(shape: &[usize], value: E) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn get(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range at axis {i}");
            let _ = i;
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Same buffer under a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Consuming reshape: no copy.
    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    /// Axis permutation (copies into a fresh contiguous buffer).
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if perm.len() != rank {
            return Err(Error::Shape(format!(
                "permutation {perm:?} does not match rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::Shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        // out axis i advances the input by in_strides[perm[i]]
        let mut out = Tensor::zeros(&out_shape)?;
        let out_strides = out.strides();
        let n = self.numel();
        let od = out.data_mut();
        for (flat_in, &v) in self.data.iter().enumerate() {
            let mut rem = flat_in;
            let mut flat_out = 0;
            for (axis, &stride) in in_strides.iter().enumerate() {
                let ix = rem / stride;
                rem %= stride;
                // position of input axis `axis` in the output
                let out_axis = perm.iter().position(|&p| p == axis).unwrap();
                flat_out += ix * out_strides[out_axis];
            }
            od[flat_out] = v;
        }
        debug_assert_eq!(n, out.numel());
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Convert element type (used to move between f32 training tensors and
    /// f64 gradient-check tensors).
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }
}

/// `out[i] = a[i] + b[i]`; shapes must match exactly.
pub fn elementwise_add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "elementwise_add: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// `out[i] = max(a[i], 0)`.
pub fn relu<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|x| x.maximum(E::ZERO))
}

/// Matrix product along one axis: `out[.., j, ..] = Σ_k w[j, k] · t[.., k, ..]`.
///
/// `w` must be rank 2 with `w.shape() == [c_out, c_in]` and
/// `t.shape()[axis] == c_in`. All other axes pass through unchanged.
pub fn mode_n_product<E: Scalar>(t: &Tensor<E>, w: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if w.rank() != 2 {
        return Err(Error::Shape(format!(
            "mode_n_product weight must be rank 2, got {:?}",
            w.shape()
        )));
    }
    if axis >= t.rank() {
        return Err(Error::Axis { axis, rank: t.rank() });
    }
    let (c_out, c_in) = (w.shape[0], w.shape[1]);
    if t.shape[axis] != c_in {
        return Err(Error::Shape(format!(
            "mode_n_product: axis {axis} extent {} != weight inner dim {c_in}",
            t.shape[axis]
        )));
    }
    if axis == t.rank() - 1 {
        return mode_last(t, w, c_in, c_out);
    }
    // General case: rotate target axis to the end, multiply, rotate back.
    let rank = t.rank();
    let mut to_last: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    to_last.push(axis);
    let moved = t.permute(&to_last)?;
    let out_moved = mode_last(&moved, w, c_in, c_out)?;
    let mut back = vec![0usize; rank];
    for (i, &p) in to_last.iter().enumerate() {
        back[p] = i;
    }
    out_moved.permute(&back)
}

/// Fast path: the contraction axis is the last (contiguous) one.
/// Computes `out = X · Wᵀ` as one gemm over the flattened leading axes.
fn mode_last<E: Scalar>(t: &Tensor<E>, w: &Tensor<E>, c_in: usize, c_out: usize) -> Result<Tensor<E>> {
    let rows = t.numel() / c_in;
    let mut out_shape = t.shape.clone();
    *out_shape.last_mut().unwrap() = c_out;
    let mut out = Tensor::zeros(&out_shape)?;
    // B = Wᵀ expressed through strides on W's buffer: element (k, j) = w[j*c_in + k]
    E::gemm(
        rows,
        c_in,
        c_out,
        &t.data,
        c_in as isize,
        1,
        &w.data,
        1,
        c_in as isize,
        &mut out.data,
    );
    Ok(out)
}

/// Numerically-stable softmax along `axis` with temperature `tau`:
/// `out = exp((x - max)/tau) / Σ exp((x - max)/tau)`.
pub fn softmax_over_axis<E: Scalar>(t: &Tensor<E>, axis: usize, tau: E) -> Result<Tensor<E>> {
    if axis >= t.rank() {
        return Err(Error::Axis { axis, rank: t.rank() });
    }
    if !(tau > E::ZERO) {
        return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
    }
    let mut out = t.clone();
    let n = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = t.data[base];
            for j in 1..n {
                let v = t.data[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::ZERO;
            for j in 0..n {
                let e = ((t.data[base + j * inner] - max) / tau).exp();
                out.data[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out.data[base + j * inner] = out.data[base + j * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Bilinear 2D resampling with the align-corners=false convention.
///
/// Rank-2 tensors are treated as `(H, W)`; rank >= 3 as `(..., H, W, C)`.
pub fn bilinear_resize_2d<E: Scalar>(t: &Tensor<E>, new_h: usize, new_w: usize) -> Result<Tensor<E>> {
    let plan = BilinearPlan::new(t.shape(), new_h, new_w)?;
    let mut out = Tensor::zeros(&plan.out_shape)?;
    let (h, w, c) = (plan.in_h, plan.in_w, plan.channels);
    for b in 0..plan.batch {
        let src = &t.data[b * h * w * c..(b + 1) * h * w * c];
        let dst = &mut out.data[b * new_h * new_w * c..(b + 1) * new_h * new_w * c];
        for (oy, (y0, y1, wy)) in plan.rows.iter().enumerate() {
            for (ox, (x0, x1, wx)) in plan.cols.iter().enumerate() {
                let d = &mut dst[(oy * new_w + ox) * c..(oy * new_w + ox + 1) * c];
                let r00 = &src[(y0 * w + x0) * c..];
                let r01 = &src[(y0 * w + x1) * c..];
                let r10 = &src[(y1 * w + x0) * c..];
                let r11 = &src[(y1 * w + x1) * c..];
                let (wy, wx) = (E::from_f64(*wy), E::from_f64(*wx));
                let one = E::ONE;
                for ch in 0..c {
                    let top = r00[ch] * (one - wx) + r01[ch] * wx;
                    let bot = r10[ch] * (one - wx) + r11[ch] * wx;
                    d[ch] = top * (one - wy) + bot * wy;
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed source taps for one bilinear resize. Shared by the forward op
/// and its backward scatter.
pub(crate) struct BilinearPlan {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_shape: Vec<usize>,
    /// (low index, high index, high weight) per output row / column.
    pub rows: Vec<(usize, usize, f64)>,
    pub cols: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(shape: &[usize], new_h: usize, new_w: usize) -> Result<Self> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::Shape("bilinear_resize_2d: target extents must be >= 1".into()));
        }
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::Shape("bilinear_resize_2d needs rank >= 2".into()));
        }
        let (batch, in_h, in_w, channels, out_shape) = if rank == 2 {
            (1, shape[0], shape[1], 1, vec![new_h, new_w])
        } else {
            let batch: usize = shape[..rank - 3].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape[rank - 3] = new_h;
            out_shape[rank - 2] = new_w;
            (batch, shape[rank - 3], shape[rank - 2], shape[rank - 1], out_shape)
        };
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = (o as f64 + 0.5) * scale - 0.5;
                    let src = src.max(0.0).min((n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        Ok(BilinearPlan {
            batch,
            in_h,
            in_w,
            channels,
            out_shape,
            rows: taps(in_h, new_h),
            cols: taps(in_w, new_w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_shapes_and_sum() {
        let t = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.data().iter().all(|&x| x == 0.0));
        let t = Tensor::<f64>::zeros(&[1]).unwrap();
        assert_eq!(t.data(), &[0.0]);
        let t = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        assert_eq!(t.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn zeros_rejects_overflow_and_empty() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[usize::MAX, 2]),
            Err(Error::Size(_))
        ));
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[3, 0]).is_err());
    }

    #[test]
    fn add_basic_and_identity() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(elementwise_add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        let z = Tensor::zeros(&[2]).unwrap();
        assert_eq!(elementwise_add(&a, &z).unwrap().data(), a.data());
        let bad = Tensor::<f64>::zeros(&[3]).unwrap();
        assert!(elementwise_add(&a, &bad).is_err());
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let t = Tensor::from_vec(&[3], vec![-5.0f64, -0.1, -7.0]).unwrap();
        assert!(relu(&t).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mode_n_identity_is_bitwise() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5f64, -2.0, 0.25, 3.0, 4.0, -1.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let out = mode_n_product(&t, &eye, 1).unwrap();
        assert_eq!(out.data(), t.data());
        // identity along a non-last axis too
        let eye2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = mode_n_product(&t, &eye2, 0).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn mode_n_all_ones_sums_axis() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = Tensor::filled(&[1, 3], 1.0).unwrap();
        let out = mode_n_product(&t, &ones, 1).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[6.0, 15.0]);
    }

    #[test]
    fn mode_n_rejects_bad_axis_and_dims() {
        let t = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 3]).unwrap();
        assert!(matches!(mode_n_product(&t, &w, 2), Err(Error::Axis { .. })));
        assert!(mode_n_product(&t, &w, 0).is_err()); // inner dim mismatch
    }

    #[test]
    fn softmax_uniform_and_onehot() {
        let t = Tensor::filled(&[4], 2.5f64).unwrap();
        let s = softmax_over_axis(&t, 0, 1.0).unwrap();
        for &p in s.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let t = Tensor::from_vec(&[3], vec![10.0f64, 0.0, 0.0]).unwrap();
        let s = softmax_over_axis(&t, 0, 0.01).unwrap();
        assert!(s.data()[0] > 1.0 - 1e-6);
        assert!(matches!(softmax_over_axis(&t, 0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_over_axis(&t, 0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_sums_to_one_along_middle_axis() {
        let t = Tensor::from_vec(&[2, 3, 2], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect())
            .unwrap();
        let s = softmax_over_axis(&t, 1, 0.5).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|j| s.get(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..3 {
                    let p = s.get(&[o, j, i]);
                    assert!((0.0..=1.0).contains(&p));
                }
            }
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let t = Tensor::filled(&[4, 4], 3.25f64).unwrap();
        let r = bilinear_resize_2d(&t, 2, 2).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert!(r.data().iter().all(|&x| (x - 3.25).abs() < 1e-12));
        let t = Tensor::from_vec(&[2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let same = bilinear_resize_2d(&t, 2, 2).unwrap();
        for (a, b) in same.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_2x2_to_4x4_known_values() {
        // align-corners=false taps for 2 -> 4: src = (o + 0.5)/2 - 0.5
        // o=0 -> -0.25 (clamped 0), o=1 -> 0.25, o=2 -> 0.75, o=3 -> 1.25 (clamped 1)
        let t = Tensor::from_vec(&[2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize_2d(&t, 4, 4).unwrap();
        let rows = [0.0f64, 0.25, 0.75, 1.0];
        let cols = [0.0f64, 0.25, 0.75, 1.0];
        for (oy, &wy) in rows.iter().enumerate() {
            for (ox, &wx) in cols.iter().enumerate() {
                let expect = (1.0 - wy) * ((1.0 - wx) * 0.0 + wx * 1.0)
                    + wy * ((1.0 - wx) * 2.0 + wx * 3.0);
                let got = r.get(&[oy, ox]);
                assert!(
                    (got - expect).abs() < 1e-12,
                    "({oy},{ox}): got {got}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), t.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(t.reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
