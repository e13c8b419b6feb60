//! Strided temporal convolution and its transpose.
//!
//! Inputs are `[T, d_in]` or `[T, N, d_in]` (timestep-major node rows); the
//! kernel is `[k, d_in, d_out]` and is shared across the `N` axis. Both
//! operations use valid (unpadded) windows.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `(T, N, d)` view of a rank-2 or rank-3 temporal input.
pub(crate) fn temporal_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((t, 1, d)),
        [t, n, d] => Ok((t, n, d)),
        ref s => Err(dim_err!("temporal input must be rank 2 or 3, got {s:?}")),
    }
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match *kernel.shape() {
        [k, i, o] => Ok((k, i, o)),
        ref s => Err(dim_err!("kernel must be [k, d_in, d_out], got {s:?}")),
    }
}

fn out_shape(like: &Tensor, t: usize, n: usize, d: usize) -> Vec<usize> {
    if like.rank() == 2 {
        vec![t, d]
    } else {
        vec![t, n, d]
    }
}

pub fn conv_output_len(t: usize, k: usize, stride: usize) -> usize {
    (t - k + 1).div_ceil(stride)
}

pub fn deconv_output_len(t: usize, k: usize, stride: usize) -> usize {
    (t - 1) * stride + k
}

/// Valid strided convolution along the leading (time) axis.
pub fn conv1d_temporal(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, n, din) = temporal_dims(x)?;
    let (k, kin, dout) = kernel_dims(kernel)?;
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    if kin != din {
        return Err(dim_err!("kernel expects d_in {kin}, input has {din}"));
    }
    if t < k {
        return Err(dim_err!("temporal extent {t} shorter than kernel {k}"));
    }
    let t_out = conv_output_len(t, k, stride);
    let xs = x.data();
    let ks = kernel.data();
    let mut acc = vec![0.0f64; t_out * n * dout];
    for to in 0..t_out {
        for j in 0..k {
            let ti = to * stride + j;
            for node in 0..n {
                let xrow = &xs[(ti * n + node) * din..(ti * n + node + 1) * din];
                let arow = &mut acc[(to * n + node) * dout..(to * n + node + 1) * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &ks[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (a, &kv) in arow.iter_mut().zip(krow) {
                        *a += xv as f64 * kv as f64;
                    }
                }
            }
        }
    }
    Tensor::new(
        &out_shape(x, t_out, n, dout),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Transposed convolution: output extent `(T - 1) * stride + k`.
pub fn deconv1d_temporal(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, n, din) = temporal_dims(x)?;
    let (k, kin, dout) = kernel_dims(kernel)?;
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    if kin != din {
        return Err(dim_err!("kernel expects d_in {kin}, input has {din}"));
    }
    let t_out = deconv_output_len(t, k, stride);
    let xs = x.data();
    let ks = kernel.data();
    let mut acc = vec![0.0f64; t_out * n * dout];
    for ti in 0..t {
        for j in 0..k {
            let to = ti * stride + j;
            for node in 0..n {
                let xrow = &xs[(ti * n + node) * din..(ti * n + node + 1) * din];
                let arow = &mut acc[(to * n + node) * dout..(to * n + node + 1) * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &ks[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (a, &kv) in arow.iter_mut().zip(krow) {
                        *a += xv as f64 * kv as f64;
                    }
                }
            }
        }
    }
    Tensor::new(
        &out_shape(x, t_out, n, dout),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Gradient of a conv/deconv with respect to its kernel.
///
/// `forward` selects the index relation: for the convolution the input
/// timestep is `to * stride + j`; for the transpose the output timestep is
/// `ti * stride + j`.
pub(crate) fn kernel_grad(
    x: &Tensor,
    grad_out: &Tensor,
    k: usize,
    stride: usize,
    transposed: bool,
) -> Result<Tensor> {
    let (t, n, din) = temporal_dims(x)?;
    let (tg, ng, dout) = temporal_dims(grad_out)?;
    debug_assert_eq!(n, ng);
    let xs = x.data();
    let gs = grad_out.data();
    let mut acc = vec![0.0f64; k * din * dout];
    let outer = if transposed { t } else { tg };
    for a in 0..outer {
        for j in 0..k {
            let (ti, to) = if transposed {
                (a, a * stride + j)
            } else {
                (a * stride + j, a)
            };
            if ti >= t || to >= tg {
                continue;
            }
            for node in 0..n {
                let xrow = &xs[(ti * n + node) * din..(ti * n + node + 1) * din];
                let grow = &gs[(to * n + node) * dout..(to * n + node + 1) * dout];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &mut acc[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (kv, &g) in krow.iter_mut().zip(grow) {
                        *kv += xv as f64 * g as f64;
                    }
                }
            }
        }
    }
    Tensor::new(&[k, din, dout], acc.into_iter().map(|v| v as f32).collect())
}

/// Gradient of a conv/deconv with respect to its input, shaped like `x_shape`.
pub(crate) fn input_grad(
    x_shape: &[usize],
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    transposed: bool,
) -> Result<Tensor> {
    let (k, din, dout) = kernel_dims(kernel)?;
    let (t, n) = match *x_shape {
        [t, _] => (t, 1),
        [t, n, _] => (t, n),
        ref s => return Err(dim_err!("bad input shape {s:?}")),
    };
    let (tg, _, _) = temporal_dims(grad_out)?;
    let ks = kernel.data();
    let gs = grad_out.data();
    let mut acc = vec![0.0f64; t * n * din];
    let outer = if transposed { t } else { tg };
    for a in 0..outer {
        for j in 0..k {
            let (ti, to) = if transposed {
                (a, a * stride + j)
            } else {
                (a * stride + j, a)
            };
            if ti >= t || to >= tg {
                continue;
            }
            for node in 0..n {
                let grow = &gs[(to * n + node) * dout..(to * n + node + 1) * dout];
                let arow = &mut acc[(ti * n + node) * din..(ti * n + node + 1) * din];
                for (i, av) in arow.iter_mut().enumerate() {
                    let krow = &ks[(j * din + i) * dout..(j * din + i + 1) * dout];
                    *av += krow
                        .iter()
                        .zip(grow)
                        .map(|(&kv, &g)| kv as f64 * g as f64)
                        .sum::<f64>();
                }
            }
        }
    }
    Tensor::new(x_shape, acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn identity_kernel(d: usize) -> Tensor {
        Tensor::eye(d).reshape(&[1, d, d]).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(conv1d_temporal(&x, &identity_kernel(2), 1).unwrap(), x);
        assert_eq!(deconv1d_temporal(&x, &identity_kernel(2), 1).unwrap(), x);
    }

    #[test]
    fn strided_ones_kernel() {
        let x = Tensor::new(&[4, 1], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::full(&[2, 1, 1], 1.0);
        assert_eq!(conv1d_temporal(&x, &k, 2).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn too_short_input() {
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let k = Tensor::full(&[2, 1, 1], 1.0);
        assert!(matches!(conv1d_temporal(&x, &k, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn transpose_by_hand() {
        let x = Tensor::new(&[2, 1], vec![1., 2.]).unwrap();
        let k = Tensor::full(&[2, 1, 1], 1.0);
        assert_eq!(deconv1d_temporal(&x, &k, 2).unwrap().data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(4, 2, 2), 2);
        assert_eq!(conv_output_len(7, 2, 2), 3);
        assert_eq!(conv_output_len(5, 1, 1), 5);
        assert_eq!(deconv_output_len(3, 2, 2), 6);
    }

    #[test]
    fn unit_conv_equals_per_step_matmul() {
        let x = Tensor::new(&[3, 2, 2], (0..12).map(|v| v as f32 * 0.25 - 1.0).collect()).unwrap();
        let w = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
        let y = conv1d_temporal(&x, &w.reshape(&[1, 2, 3]).unwrap(), 1).unwrap();
        let flat = x.reshape(&[6, 2]).unwrap().matmul(&w).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        assert!(y.reshape(&[6, 3]).unwrap().max_abs_diff(&flat).unwrap() < 1e-6);
    }

    #[test]
    fn nodes_do_not_mix() {
        // Node 1 is all zeros, so its output must stay zero.
        let x = Tensor::new(&[2, 2, 1], vec![1., 0., 2., 0.]).unwrap();
        let k = Tensor::full(&[2, 1, 1], 1.0);
        let y = conv1d_temporal(&x, &k, 1).unwrap();
        assert_eq!(y.data(), &[3., 0.]);
        let z = deconv1d_temporal(&x, &k, 2).unwrap();
        assert_eq!(z.data(), &[1., 0., 1., 0., 2., 0., 2., 0.]);
    }
}
