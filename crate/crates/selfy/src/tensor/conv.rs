//! Strided 3D cross-correlation over the trailing `(A, B, D, C_in)` axes of a
//! tensor, batched over any leading axes.
//!
//! Implementation is im2col + gemm, processed in fixed-size row chunks. The
//! forward pass parallelises over chunks (each output element is written by
//! exactly one task, so results are identical for any thread count); the
//! backward passes stay sequential because their scatter/accumulate steps
//! overlap between chunks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows of the im2col matrix handled per gemm call.
const CHUNK: usize = 128;

#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
    pub k_ext: [usize; 3],
    pub strides: [usize; 3],
    pub pads: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn out_shape(&self, input_shape: &[usize]) -> Vec<usize> {
        let lead = input_shape.len() - 4;
        let mut s = input_shape[..lead].to_vec();
        s.extend_from_slice(&self.out_ext);
        s.push(self.c_out);
        s
    }

    fn patch_len(&self) -> usize {
        self.k_ext[0] * self.k_ext[1] * self.k_ext[2] * self.c_in
    }

    fn rows(&self) -> usize {
        self.batch * self.out_ext[0] * self.out_ext[1] * self.out_ext[2]
    }
}

/// `floor((in + 2*pad - k)/stride) + 1`, rejecting non-positive extents.
pub fn conv_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::Shape(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv_geom(
    input_shape: &[usize],
    kernel_shape: &[usize],
    strides: [usize; 3],
    pads: [usize; 3],
) -> Result<ConvGeom> {
    if input_shape.len() < 4 {
        return Err(Error::Shape(format!(
            "conv3d input needs rank >= 4 (got {input_shape:?})"
        )));
    }
    if kernel_shape.len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d kernel must be rank 5 (kA,kB,kD,Cin,Cout), got {kernel_shape:?}"
        )));
    }
    let lead = input_shape.len() - 4;
    let batch: usize = input_shape[..lead].iter().product();
    let in_ext = [input_shape[lead], input_shape[lead + 1], input_shape[lead + 2]];
    let c_in = input_shape[lead + 3];
    let k_ext = [kernel_shape[0], kernel_shape[1], kernel_shape[2]];
    if kernel_shape[3] != c_in {
        return Err(Error::Shape(format!(
            "conv3d: kernel expects {} input channels, tensor has {c_in}",
            kernel_shape[3]
        )));
    }
    let c_out = kernel_shape[4];
    let mut out_ext = [0usize; 3];
    for i in 0..3 {
        out_ext[i] = conv_output_extent(in_ext[i], k_ext[i], strides[i], pads[i])?;
    }
    Ok(ConvGeom { batch, in_ext, out_ext, k_ext, strides, pads, c_in, c_out })
}

/// Gather the im2col rows `row0..row0+n` into `cols` (`n * patch_len` elements).
fn gather_rows<E: Scalar>(input: &[E], g: &ConvGeom, row0: usize, n: usize, cols: &mut [E]) {
    let [ia_n, ib_n, id_n] = g.in_ext;
    let [oa_n, ob_n, od_n] = g.out_ext;
    let [ka_n, kb_n, kd_n] = g.k_ext;
    let c = g.c_in;
    let patch = g.patch_len();
    for r in 0..n {
        let mut rem = row0 + r;
        let od = rem % od_n;
        rem /= od_n;
        let ob = rem % ob_n;
        rem /= ob_n;
        let oa = rem % oa_n;
        let b = rem / oa_n;
        let ia0 = (oa * g.strides[0]) as isize - g.pads[0] as isize;
        let ib0 = (ob * g.strides[1]) as isize - g.pads[1] as isize;
        let id0 = (od * g.strides[2]) as isize - g.pads[2] as isize;
        let dst_row = &mut cols[r * patch..(r + 1) * patch];
        let mut w = 0;
        for ka in 0..ka_n {
            let ia = ia0 + ka as isize;
            for kb in 0..kb_n {
                let ib = ib0 + kb as isize;
                let in_plane = ia >= 0 && (ia as usize) < ia_n && ib >= 0 && (ib as usize) < ib_n;
                for kd in 0..kd_n {
                    let id = id0 + kd as isize;
                    let seg = &mut dst_row[w..w + c];
                    if in_plane && id >= 0 && (id as usize) < id_n {
                        let src = ((b * ia_n + ia as usize) * ib_n + ib as usize) * id_n
                            + id as usize;
                        seg.copy_from_slice(&input[src * c..src * c + c]);
                    } else {
                        seg.fill(E::ZERO);
                    }
                    w += c;
                }
            }
        }
    }
}

/// Scatter-add the gradient rows back into the input gradient buffer
/// (the transpose of [`gather_rows`]).
fn scatter_rows<E: Scalar>(gin: &mut [E], g: &ConvGeom, row0: usize, n: usize, gcols: &[E]) {
    let [ia_n, ib_n, id_n] = g.in_ext;
    let [oa_n, ob_n, od_n] = g.out_ext;
    let [ka_n, kb_n, kd_n] = g.k_ext;
    let c = g.c_in;
    let patch = g.patch_len();
    for r in 0..n {
        let mut rem = row0 + r;
        let od = rem % od_n;
        rem /= od_n;
        let ob = rem % ob_n;
        rem /= ob_n;
        let oa = rem % oa_n;
        let b = rem / oa_n;
        let ia0 = (oa * g.strides[0]) as isize - g.pads[0] as isize;
        let ib0 = (ob * g.strides[1]) as isize - g.pads[1] as isize;
        let id0 = (od * g.strides[2]) as isize - g.pads[2] as isize;
        let src_row = &gcols[r * patch..(r + 1) * patch];
        let mut w = 0;
        for ka in 0..ka_n {
            let ia = ia0 + ka as isize;
            for kb in 0..kb_n {
                let ib = ib0 + kb as isize;
                let in_plane = ia >= 0 && (ia as usize) < ia_n && ib >= 0 && (ib as usize) < ib_n;
                for kd in 0..kd_n {
                    let id = id0 + kd as isize;
                    if in_plane && id >= 0 && (id as usize) < id_n {
                        let dst = ((b * ia_n + ia as usize) * ib_n + ib as usize) * id_n
                            + id as usize;
                        let seg = &mut gin[dst * c..dst * c + c];
                        for (d, &s) in seg.iter_mut().zip(&src_row[w..w + c]) {
                            *d += s;
                        }
                    }
                    w += c;
                }
            }
        }
    }
}

/// Standard zero-padded strided cross-correlation.
pub fn conv3d<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    strides: [usize; 3],
    pads: [usize; 3],
) -> Result<Tensor<E>> {
    conv3d_fused(input, kernel, None, false, strides, pads)
}

/// Convolution with optional per-output-channel bias and ReLU folded into the
/// output pass, so layer forwards materialise a single tensor.
pub fn conv3d_fused<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    relu: bool,
    strides: [usize; 3],
    pads: [usize; 3],
) -> Result<Tensor<E>> {
    let g = conv_geom(input.shape(), kernel.shape(), strides, pads)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Shape(format!(
                "conv bias must have shape [{}], got {:?}",
                g.c_out,
                b.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(&g.out_shape(input.shape()))?;
    let rows = g.rows();
    let patch = g.patch_len();
    let c_out = g.c_out;
    let kdata = kernel.data();
    let idata = input.data();
    let bias_data = bias.map(|b| b.data());
    out.data_mut()
        .par_chunks_mut(CHUNK * c_out)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let row0 = ci * CHUNK;
            let n = out_chunk.len() / c_out;
            let mut cols = vec![E::ZERO; n * patch];
            gather_rows(idata, &g, row0, n, &mut cols);
            E::gemm(n, patch, c_out, &cols, patch as isize, 1, kdata, c_out as isize, 1, out_chunk);
            if let Some(bd) = bias_data {
                for row in out_chunk.chunks_mut(c_out) {
                    for (v, &b) in row.iter_mut().zip(bd) {
                        *v += b;
                    }
                }
            }
            if relu {
                for v in out_chunk.iter_mut() {
                    *v = v.maximum(E::ZERO);
                }
            }
        });
    let _ = rows;
    Ok(out)
}

/// Gradient of the convolution output w.r.t. the kernel:
/// `g_k[K x Cout] = Σ_chunks colsᵀ · g_out`.
pub(crate) fn conv3d_grad_kernel<E: Scalar>(
    input: &Tensor<E>,
    gout: &[E],
    kernel_shape: &[usize],
    g: &ConvGeom,
) -> Tensor<E> {
    let patch = g.patch_len();
    let c_out = g.c_out;
    let rows = g.rows();
    let mut gk = Tensor::zeros(kernel_shape).expect("kernel shape");
    let mut cols = vec![E::ZERO; CHUNK * patch];
    let mut row0 = 0;
    while row0 < rows {
        let n = CHUNK.min(rows - row0);
        gather_rows(input.data(), g, row0, n, &mut cols);
        // colsᵀ (patch x n) · gout_chunk (n x c_out)
        E::gemm(
            patch,
            n,
            c_out,
            &cols,
            1,
            patch as isize,
            &gout[row0 * c_out..(row0 + n) * c_out],
            c_out as isize,
            1,
            gk.data_mut(),
        );
        row0 += n;
    }
    gk
}

/// Gradient of the convolution output w.r.t. the input:
/// per chunk `g_cols = g_out · kernelᵀ`, then scatter-add.
pub(crate) fn conv3d_grad_input<E: Scalar>(
    kernel: &Tensor<E>,
    gout: &[E],
    input_shape: &[usize],
    g: &ConvGeom,
) -> Tensor<E> {
    let patch = g.patch_len();
    let c_out = g.c_out;
    let rows = g.rows();
    let mut gin = Tensor::zeros(input_shape).expect("input shape");
    let mut gcols = vec![E::ZERO; CHUNK * patch];
    let mut row0 = 0;
    while row0 < rows {
        let n = CHUNK.min(rows - row0);
        gcols[..n * patch].fill(E::ZERO);
        // gout_chunk (n x c_out) · kernelᵀ (c_out x patch)
        E::gemm(
            n,
            c_out,
            patch,
            &gout[row0 * c_out..(row0 + n) * c_out],
            c_out as isize,
            1,
            kernel.data(),
            1,
            c_out as isize,
            &mut gcols[..n * patch],
        );
        scatter_rows(gin.data_mut(), g, row0, n, &gcols[..n * patch]);
        row0 += n;
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        // 3x3 kernel with 1 at the centre, stride 1, same padding
        let input = Tensor::from_vec(
            &[1, 4, 4, 1],
            (0..16).map(|i| i as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let mut kdata = vec![0.0f64; 9];
        kdata[4] = 1.0;
        let kernel = Tensor::from_vec(&[1, 3, 3, 1, 1], kdata).unwrap();
        let out = conv3d(&input, &kernel, [1, 1, 1], [0, 1, 1]).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let input = Tensor::filled(&[2, 3, 3, 2], 1.5f32).unwrap();
        let kernel = Tensor::zeros(&[1, 3, 3, 2, 4]).unwrap();
        let out = conv3d(&input, &kernel, [1, 1, 1], [0, 1, 1]).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 4]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_extent_formula_and_errors() {
        assert_eq!(conv_output_extent(4, 3, 2, 1).unwrap(), 2);
        assert_eq!(conv_output_extent(9, 3, 2, 1).unwrap(), 5);
        assert_eq!(conv_output_extent(3, 3, 1, 0).unwrap(), 1);
        assert!(conv_output_extent(2, 5, 1, 0).is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 4, 4, 3]).unwrap();
        let kernel = Tensor::<f32>::zeros(&[1, 3, 3, 2, 4]).unwrap();
        assert!(conv3d(&input, &kernel, [1, 1, 1], [0, 1, 1]).is_err());
    }

    #[test]
    fn bias_and_relu_fusion() {
        let input = Tensor::filled(&[1, 2, 2, 1], 1.0f64).unwrap();
        let kernel = Tensor::filled(&[1, 1, 1, 1, 2], -1.0).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
        let out = conv3d_fused(&input, &kernel, Some(&bias), true, [1, 1, 1], [0, 0, 0]).unwrap();
        // pre-activation is -1 + bias -> (-0.5, 1.0); relu clamps the first
        for px in out.data().chunks(2) {
            assert_eq!(px, &[0.0, 1.0]);
        }
    }
}
