//! Gated recurrent unit layers with masking and backpropagation through time.
//!
//! Cell:
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)
//! r = σ(W_r x + U_r h + b_r)
//! ĥ = tanh(W_h x + U_h (r ∘ h) + b_h)
//! h' = (1 - z) ∘ h + z ∘ ĥ
//! ```
//!
//! Gate blocks are stacked in `z, r, h` order along the rows of `w_x`, `u`
//! and `b`. The initial state is zero.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One direction of one GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F> {
    /// `3H x d_in`
    pub w_x: Array2<F>,
    /// `3H x H`
    pub u: Array2<F>,
    /// `3H`
    pub b: Array1<F>,
}

impl<F: Real> GruParams<F> {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        GruParams {
            w_x: Array2::zeros((3 * hidden, d_in)),
            u: Array2::zeros((3 * hidden, hidden)),
            b: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }
}

/// Per-step activations kept for the backward pass, indexed by original time.
#[derive(Debug, Clone)]
pub struct GruCache<F> {
    h_prev: Array2<F>,
    z: Array2<F>,
    r: Array2<F>,
    cand: Array2<F>,
    n_valid: usize,
    direction: Direction,
}

fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn step_order(n_valid: usize, direction: Direction) -> Box<dyn Iterator<Item = usize>> {
    match direction {
        Direction::Forward => Box::new(0..n_valid),
        Direction::Backward => Box::new((0..n_valid).rev()),
    }
}

/// Run one direction over `x` (`T x d_in`), of which the first `n_valid`
/// rows are real frames. Outputs are `T x H` with zero rows past `n_valid`;
/// the backward direction starts from the last valid frame.
pub fn gru_layer<F: Real>(
    x: ArrayView2<F>,
    n_valid: usize,
    p: &GruParams<F>,
    direction: Direction,
) -> Result<(Array2<F>, GruCache<F>)> {
    let (t_len, d_in) = x.dim();
    let hid = p.hidden();
    if n_valid == 0 || t_len == 0 {
        return Err(Error::Validation("gru_layer: empty sequence".into()));
    }
    if n_valid > t_len {
        return Err(Error::Shape(format!(
            "gru_layer: {n_valid} valid frames but only {t_len} rows"
        )));
    }
    if d_in != p.input_dim() || p.u.nrows() != 3 * hid || p.b.len() != 3 * hid {
        return Err(Error::Shape(format!(
            "gru_layer: input dim {d_in}, params expect {} (hidden {hid})",
            p.input_dim()
        )));
    }

    let proj = x.slice(s![..n_valid, ..]).dot(&p.w_x.t()) + &p.b;
    let u_zr = p.u.slice(s![..2 * hid, ..]);
    let u_h = p.u.slice(s![2 * hid.., ..]);

    let mut out = Array2::zeros((t_len, hid));
    let mut h_prev_rows = Array2::zeros((t_len, hid));
    let mut z_rows = Array2::zeros((t_len, hid));
    let mut r_rows = Array2::zeros((t_len, hid));
    let mut cand_rows = Array2::zeros((t_len, hid));

    let mut h = Array1::<F>::zeros(hid);
    let mut rh = Array1::<F>::zeros(hid);
    for t in step_order(n_valid, direction) {
        let pre = proj.row(t);
        let zr = u_zr.dot(&h);
        let mut z = z_rows.row_mut(t);
        let mut r = r_rows.row_mut(t);
        for j in 0..hid {
            z[j] = sigmoid(pre[j] + zr[j]);
            r[j] = sigmoid(pre[hid + j] + zr[hid + j]);
            rh[j] = r[j] * h[j];
        }
        let uh = u_h.dot(&rh);
        let mut cand = cand_rows.row_mut(t);
        h_prev_rows.row_mut(t).assign(&h);
        for j in 0..hid {
            cand[j] = (pre[2 * hid + j] + uh[j]).tanh();
            h[j] = (F::one() - z[j]) * h[j] + z[j] * cand[j];
        }
        out.row_mut(t).assign(&h);
    }

    Ok((
        out,
        GruCache {
            h_prev: h_prev_rows,
            z: z_rows,
            r: r_rows,
            cand: cand_rows,
            n_valid,
            direction,
        },
    ))
}

/// Backpropagate `d_out` (`T x H`) through a layer run by [`gru_layer`].
/// Returns `dx` (`T x d_in`) and the parameter gradients.
pub fn gru_layer_backward<F: Real>(
    x: ArrayView2<F>,
    p: &GruParams<F>,
    cache: &GruCache<F>,
    d_out: ArrayView2<F>,
) -> (Array2<F>, GruParams<F>) {
    let hid = p.hidden();
    let n = cache.n_valid;
    let u_t = p.u.t().as_standard_layout().into_owned(); // H x 3H
    let u_zr_t = u_t.slice(s![.., ..2 * hid]);
    let u_h_t = u_t.slice(s![.., 2 * hid..]);

    let mut d_pre = Array2::<F>::zeros((n, 3 * hid));
    let mut rh_rows = Array2::<F>::zeros((n, hid));
    let mut carry = Array1::<F>::zeros(hid);
    let mut dh = Array1::<F>::zeros(hid);
    let mut d_rh = Array1::<F>::zeros(hid);
    let mut order: Vec<usize> = step_order(n, cache.direction).collect();
    order.reverse();
    for t in order {
        let hp = cache.h_prev.row(t);
        let z = cache.z.row(t);
        let r = cache.r.row(t);
        let cand = cache.cand.row(t);
        for j in 0..hid {
            dh[j] = d_out[[t, j]] + carry[j];
        }
        let mut row = d_pre.row_mut(t);
        let mut dhp = Array1::<F>::zeros(hid);
        for j in 0..hid {
            let d_cand = dh[j] * z[j];
            let dz = dh[j] * (cand[j] - hp[j]);
            dhp[j] = dh[j] * (F::one() - z[j]);
            row[2 * hid + j] = d_cand * (F::one() - cand[j] * cand[j]);
            row[j] = dz * z[j] * (F::one() - z[j]);
            rh_rows[[t, j]] = r[j] * hp[j];
        }
        let d_ah = row.slice(s![2 * hid..]);
        d_rh.assign(&u_h_t.dot(&d_ah));
        for j in 0..hid {
            let dr = d_rh[j] * hp[j];
            dhp[j] += d_rh[j] * r[j];
            row[hid + j] = dr * r[j] * (F::one() - r[j]);
        }
        let d_zr = row.slice(s![..2 * hid]);
        dhp += &u_zr_t.dot(&d_zr);
        carry = dhp;
    }

    let xv = x.slice(s![..n, ..]);
    let d_wx = d_pre.t().dot(&xv);
    let db = d_pre.sum_axis(Axis(0));
    let mut du = Array2::<F>::zeros((3 * hid, hid));
    du.slice_mut(s![..2 * hid, ..]).assign(
        &d_pre
            .slice(s![.., ..2 * hid])
            .t()
            .dot(&cache.h_prev.slice(s![..n, ..])),
    );
    du.slice_mut(s![2 * hid.., ..])
        .assign(&d_pre.slice(s![.., 2 * hid..]).t().dot(&rh_rows));
    let mut dx = Array2::<F>::zeros(x.raw_dim());
    dx.slice_mut(s![..n, ..]).assign(&d_pre.dot(&p.w_x));
    (
        dx,
        GruParams {
            w_x: d_wx,
            u: du,
            b: db,
        },
    )
}

/// Forward and backward directions of one bidirectional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams<F> {
    pub fwd: GruParams<F>,
    pub bwd: GruParams<F>,
}

#[derive(Debug, Clone)]
pub struct BiGruCache<F> {
    fwd: GruCache<F>,
    bwd: GruCache<F>,
}

/// Bidirectional layer; output rows are `[forward state, backward state]`.
pub fn bi_gru_forward<F: Real>(
    x: ArrayView2<F>,
    n_valid: usize,
    p: &BiGruParams<F>,
) -> Result<(Array2<F>, BiGruCache<F>)> {
    let (hf, cf) = gru_layer(x, n_valid, &p.fwd, Direction::Forward)?;
    let (hb, cb) = gru_layer(x, n_valid, &p.bwd, Direction::Backward)?;
    let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("equal row counts");
    Ok((out, BiGruCache { fwd: cf, bwd: cb }))
}

pub fn bi_gru_backward<F: Real>(
    x: ArrayView2<F>,
    p: &BiGruParams<F>,
    cache: &BiGruCache<F>,
    d_out: ArrayView2<F>,
) -> (Array2<F>, BiGruParams<F>) {
    let hid = p.fwd.hidden();
    let (mut dx, gf) = gru_layer_backward(x, &p.fwd, &cache.fwd, d_out.slice(s![.., ..hid]));
    let (dxb, gb) = gru_layer_backward(x, &p.bwd, &cache.bwd, d_out.slice(s![.., hid..]));
    dx += &dxb;
    (dx, BiGruParams { fwd: gf, bwd: gb })
}
