//! Strided 1-D convolution over time, computed as im2col + GEMM.

use ndarray::{Array2, ArrayView2, ArrayView3};

use super::Real;
use crate::{Error, Result};

/// `floor((t + 2 padding - kernel) / stride) + 1`, or `None` when the padded
/// input is shorter than the kernel.
pub fn conv_output_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Saved input patches for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv1dCache<F> {
    cols: Array2<F>,
    t_in: usize,
    stride: usize,
    padding: usize,
}

/// `x` is `c_in x t`, `k` is `c_out x c_in x kernel`; output is `c_out x t_out`.
pub fn conv1d<F: Real>(
    x: ArrayView2<F>,
    k: ArrayView3<F>,
    stride: usize,
    padding: usize,
) -> Result<(Array2<F>, Conv1dCache<F>)> {
    let (c_in, t) = x.dim();
    let (c_out, kc_in, width) = k.dim();
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input has {c_in} channels, kernel expects {kc_in}"
        )));
    }
    let t_out = conv_output_len(t, width, stride, padding).ok_or_else(|| {
        Error::Shape(format!(
            "conv1d: {t} frames with padding {padding} is shorter than kernel {width}"
        ))
    })?;

    let mut cols = Array2::<F>::zeros((c_in * width, t_out));
    for c in 0..c_in {
        for kk in 0..width {
            let row = c * width + kk;
            for j in 0..t_out {
                let src = (j * stride + kk) as isize - padding as isize;
                if src >= 0 && (src as usize) < t {
                    cols[[row, j]] = x[[c, src as usize]];
                }
            }
        }
    }
    let kflat = k
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out, c_in * width))
        .expect("contiguous kernel");
    let y = kflat.dot(&cols);
    Ok((
        y,
        Conv1dCache {
            cols,
            t_in: t,
            stride,
            padding,
        },
    ))
}

/// Gradients of [`conv1d`]: `(dx, dk)` with `dx` shaped `c_in x t`.
pub fn conv1d_backward<F: Real>(
    cache: &Conv1dCache<F>,
    k: ArrayView3<F>,
    dy: ArrayView2<F>,
) -> (Array2<F>, ndarray::Array3<F>) {
    let (c_out, c_in, width) = k.dim();
    let kflat = k
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out, c_in * width))
        .expect("contiguous kernel");
    let dk_flat = dy.dot(&cache.cols.t());
    let dk =
        ndarray::Array3::from_shape_vec((c_out, c_in, width), dk_flat.iter().copied().collect())
            .expect("kernel gradient shape");
    let dcols = kflat.t().dot(&dy);
    let t_out = dy.ncols();
    let mut dx = Array2::<F>::zeros((c_in, cache.t_in));
    for c in 0..c_in {
        for kk in 0..width {
            let row = c * width + kk;
            for j in 0..t_out {
                let src = (j * cache.stride + kk) as isize - cache.padding as isize;
                if src >= 0 && (src as usize) < cache.t_in {
                    dx[[c, src as usize]] += dcols[[row, j]];
                }
            }
        }
    }
    (dx, dk)
}
