//! Dense kernels: affine maps, normalization, cosine similarity and the
//! masked per-feature softmax used by vectorial attention.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Real;
use crate::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// `y = W x + b`.
pub fn linear<F: Real>(x: ArrayView1<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Result<Array1<F>> {
    let (n_out, n_in) = w.dim();
    if x.len() != n_in || b.len() != n_out {
        return Err(Error::Shape(format!(
            "linear: W is {n_out}x{n_in}, x has {}, b has {}",
            x.len(),
            b.len()
        )));
    }
    Ok(w.dot(&x) + &b)
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward<F: Real>(
    x: ArrayView1<F>,
    w: ArrayView2<F>,
    dy: ArrayView1<F>,
) -> (Array1<F>, Array2<F>, Array1<F>) {
    let dx = w.t().dot(&dy);
    let dw = outer(dy, x);
    (dx, dw, dy.to_owned())
}

/// Row-wise affine map over a sequence: `Y[t] = W X[t] + b`.
pub fn linear_rows<F: Real>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    b: ArrayView1<F>,
) -> Result<Array2<F>> {
    let (n_out, n_in) = w.dim();
    if x.ncols() != n_in || b.len() != n_out {
        return Err(Error::Shape(format!(
            "linear_rows: W is {n_out}x{n_in}, x rows have {}, b has {}",
            x.ncols(),
            b.len()
        )));
    }
    Ok(x.dot(&w.t()) + &b)
}

/// Gradients of [`linear_rows`]: `(dX, dW, db)`.
pub fn linear_rows_backward<F: Real>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    dy: ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(&w);
    let dw = dy.t().dot(&x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub(crate) fn outer<F: Real>(a: ArrayView1<F>, b: ArrayView1<F>) -> Array2<F> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

fn norm<F: Real>(x: ArrayView1<F>) -> F {
    x.iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// Scale `x` to unit L2 norm. Returns the normalized vector and the original norm.
pub fn l2_normalize<F: Real>(x: ArrayView1<F>) -> Result<(Array1<F>, F)> {
    let n = norm(x);
    if !(n.as_f64() > NORM_EPS) {
        return Err(Error::Numeric(format!(
            "cannot normalize a vector with norm {}",
            n.as_f64()
        )));
    }
    Ok((x.mapv(|v| v / n), n))
}

/// Backward of [`l2_normalize`] given its output `y` and the input norm.
pub fn l2_normalize_backward<F: Real>(y: ArrayView1<F>, norm: F, dy: ArrayView1<F>) -> Array1<F> {
    let proj = y.dot(&dy);
    (&dy - &y.mapv(|v| v * proj)).mapv(|v| v / norm)
}

/// `a·b / (|a| |b|)`.
pub fn cosine_similarity<F: Real>(a: ArrayView1<F>, b: ArrayView1<F>) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na.as_f64() > NORM_EPS && nb.as_f64() > NORM_EPS) {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Gradients of [`cosine_similarity`] scaled by `dcos`: `(da, db)`.
pub fn cosine_similarity_backward<F: Real>(
    a: ArrayView1<F>,
    b: ArrayView1<F>,
    dcos: F,
) -> (Array1<F>, Array1<F>) {
    let (na, nb) = (norm(a), norm(b));
    let cos = a.dot(&b) / (na * nb);
    let da = (&b.mapv(|v| v / (na * nb)) - &a.mapv(|v| v * cos / (na * na))).mapv(|v| v * dcos);
    let db = (&a.mapv(|v| v / (na * nb)) - &b.mapv(|v| v * cos / (nb * nb))).mapv(|v| v * dcos);
    (da, db)
}

/// Mask with the first `n_valid` of `len` frames set.
pub fn prefix_mask(len: usize, n_valid: usize) -> Vec<bool> {
    (0..len).map(|t| t < n_valid).collect()
}

/// Softmax over time, independently for every feature column.
///
/// `s` is `t x d`. Masked rows receive weight exactly zero and do not enter
/// the normalizer.
pub fn softmax_over_time<F: Real>(s: ArrayView2<F>, mask: &[bool]) -> Result<Array2<F>> {
    let (t, d) = s.dim();
    if mask.len() != t {
        return Err(Error::Shape(format!(
            "softmax_over_time: {t} frames but mask of length {}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Validation(
            "softmax_over_time: mask has no valid frames".into(),
        ));
    }
    let mut out = Array2::zeros((t, d));
    for j in 0..d {
        let col = s.column(j);
        let max = col
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for i in 0..t {
            if mask[i] {
                let e = (col[i] - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        for i in 0..t {
            if mask[i] {
                out[[i, j]] /= total;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_over_time`] given its output `a`.
pub fn softmax_over_time_backward<F: Real>(a: ArrayView2<F>, da: ArrayView2<F>) -> Array2<F> {
    // Masked entries of `a` are zero, so they get zero gradient automatically.
    let inner = (&a * &da).sum_axis(Axis(0));
    let mut ds = &da - &inner.insert_axis(Axis(0));
    ds *= &a;
    ds
}
