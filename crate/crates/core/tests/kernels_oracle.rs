//! Forward kernels against plain nested-loop reimplementations, plus
//! property tests of their invariants.

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2i_core::autodiff::{
    bi_gru_forward, conv1d, conv_output_len, cosine_similarity, gru_layer, l2_normalize,
    prefix_mask, softmax_over_time, BiGruParams, Direction, GruParams,
};
use s2i_core::encoders::{
    attention, encode_caption, encode_padded_batch, AttentionParams, EncoderConfig, ModelParams,
    PaddedBatch,
};
use s2i_core::frontend::{FeatureKind, FeatureMatrix};

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-s..s))
}

fn rand1(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(-s..s))
}

fn conv_oracle(x: &Array2<f64>, k: &Array3<f64>, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, t) = x.dim();
    let (c_out, _, w) = k.dim();
    let t_out = (t + 2 * pad - w) / stride + 1;
    let mut y = Array2::zeros((c_out, t_out));
    for o in 0..c_out {
        for j in 0..t_out {
            let mut acc = 0.0;
            for c in 0..c_in {
                for q in 0..w {
                    let src = (j * stride + q) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += k[[o, c, q]] * x[[c, src as usize]];
                    }
                }
            }
            y[[o, j]] = acc;
        }
    }
    y
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let c_in = rng.gen_range(1..5);
        let c_out = rng.gen_range(1..5);
        let w: usize = rng.gen_range(1..7);
        let stride = rng.gen_range(1..4);
        let pad = rng.gen_range(0..3);
        let t: usize = rng.gen_range(w.saturating_sub(2 * pad).max(1)..20);
        let x = rand2(&mut rng, c_in, t, 1.0);
        let k = Array3::from_shape_simple_fn((c_out, c_in, w), || rng.gen_range(-1.0..1.0));
        let (y, _) = conv1d(x.view(), k.view(), stride, pad).unwrap();
        let want = conv_oracle(&x, &k, stride, pad);
        assert_eq!(y.dim(), want.dim());
        assert_eq!(Some(y.ncols()), conv_output_len(t, w, stride, pad));
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Unit-by-unit GRU recurrence without matrix helpers.
fn gru_oracle(x: &Array2<f64>, n: usize, p: &GruParams<f64>, dir: Direction) -> Array2<f64> {
    let hdim = p.u.ncols();
    let d = x.ncols();
    let mut out = Array2::zeros((x.nrows(), hdim));
    let mut h = vec![0.0; hdim];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    for t in order {
        let pre = |g: usize, i: usize, hv: &[f64]| {
            let row = g * hdim + i;
            let mut s = p.b[row];
            for j in 0..d {
                s += p.w_x[[row, j]] * x[[t, j]];
            }
            for j in 0..hdim {
                s += p.u[[row, j]] * hv[j];
            }
            s
        };
        let z: Vec<f64> = (0..hdim).map(|i| sig(pre(0, i, &h))).collect();
        let r: Vec<f64> = (0..hdim).map(|i| sig(pre(1, i, &h))).collect();
        let rh: Vec<f64> = (0..hdim).map(|i| r[i] * h[i]).collect();
        let cand: Vec<f64> = (0..hdim)
            .map(|i| {
                let row = 2 * hdim + i;
                let mut s = p.b[row];
                for j in 0..d {
                    s += p.w_x[[row, j]] * x[[t, j]];
                }
                for j in 0..hdim {
                    s += p.u[[row, j]] * rh[j];
                }
                s.tanh()
            })
            .collect();
        for i in 0..hdim {
            h[i] = (1.0 - z[i]) * h[i] + z[i] * cand[i];
            out[[t, i]] = h[i];
        }
    }
    out
}

fn rand_gru(rng: &mut ChaCha8Rng, d: usize, h: usize) -> GruParams<f64> {
    GruParams {
        w_x: rand2(rng, 3 * h, d, 0.8),
        u: rand2(rng, 3 * h, h, 0.8),
        b: rand1(rng, 3 * h, 0.3),
    }
}

#[test]
fn gru_matches_scalar_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let (d, h) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let t = rng.gen_range(1..10);
        let n = rng.gen_range(1..=t);
        let x = rand2(&mut rng, t, d, 1.0);
        let p = rand_gru(&mut rng, d, h);
        for dir in [Direction::Forward, Direction::Backward] {
            let (y, _) = gru_layer(x.view(), n, &p, dir).unwrap();
            let want = gru_oracle(&x, n, &p, dir);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn bi_gru_concatenates_forward_then_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand2(&mut rng, 7, 3, 1.0);
    let p = BiGruParams {
        fwd: rand_gru(&mut rng, 3, 4),
        bwd: rand_gru(&mut rng, 3, 4),
    };
    let (y, _) = bi_gru_forward(x.view(), 5, &p).unwrap();
    let f = gru_oracle(&x, 5, &p.fwd, Direction::Forward);
    let b = gru_oracle(&x, 5, &p.bwd, Direction::Backward);
    for t in 0..7 {
        for i in 0..4 {
            assert!((y[[t, i]] - f[[t, i]]).abs() < 1e-12);
            assert!((y[[t, 4 + i]] - b[[t, i]]).abs() < 1e-12);
        }
    }
}

fn attention_oracle(
    h: &Array2<f64>,
    p: &AttentionParams<f64>,
    n: usize,
) -> (Array1<f64>, Array2<f64>) {
    let (t, d) = h.dim();
    let a_dim = p.w.nrows();
    let mut scores = Array2::zeros((t, d));
    for s in 0..n {
        let hidden: Vec<f64> = (0..a_dim)
            .map(|k| ((0..d).map(|j| p.w[[k, j]] * h[[s, j]]).sum::<f64>() + p.b_w[k]).tanh())
            .collect();
        for j in 0..d {
            scores[[s, j]] = (0..a_dim).map(|k| p.v[[j, k]] * hidden[k]).sum::<f64>() + p.b_v[j];
        }
    }
    let mut weights = Array2::zeros((t, d));
    let mut out = Array1::zeros(d);
    for j in 0..d {
        let z: f64 = (0..n).map(|s| scores[[s, j]].exp()).sum();
        for s in 0..n {
            weights[[s, j]] = scores[[s, j]].exp() / z;
            out[j] += weights[[s, j]] * h[[s, j]];
        }
    }
    (out, weights)
}

#[test]
fn attention_matches_brute_force_and_masks_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..40 {
        let (t, d, a) = (
            rng.gen_range(1..9),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
        );
        let n = rng.gen_range(1..=t);
        let h = rand2(&mut rng, t, d, 2.0);
        let p = AttentionParams {
            w: rand2(&mut rng, a, d, 1.0),
            b_w: rand1(&mut rng, a, 0.5),
            v: rand2(&mut rng, d, a, 1.0),
            b_v: rand1(&mut rng, d, 0.5),
        };
        let (out, cache) = attention(h.view(), &p, &prefix_mask(t, n)).unwrap();
        let (want, want_w) = attention_oracle(&h, &p, n);
        for (x, y) in out.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = cache.weights();
        for (x, y) in w.iter().zip(want_w.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for j in 0..d {
            let col: f64 = (0..n).map(|s| w[[s, j]]).sum();
            assert!((col - 1.0).abs() < 1e-6);
            for s in n..t {
                assert_eq!(w[[s, j]], 0.0);
            }
        }
    }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        image_dim: 5,
        feat_dim: 4,
        conv_channels: 3,
        conv_kernel: 6,
        conv_stride: 2,
        conv_padding: 2,
        gru_hidden: 4,
        gru_layers: 3,
        attn_hidden: 3,
    }
}

fn features(rng: &mut ChaCha8Rng, frames: usize, dims: usize) -> FeatureMatrix {
    FeatureMatrix::new(
        Array2::from_shape_simple_fn((frames, dims), || rng.gen_range(-1.0f32..1.0)),
        frames,
        FeatureKind::External,
    )
    .unwrap()
}

#[test]
fn padding_does_not_change_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = ModelParams::<f32>::init(&tiny_config(), 3).unwrap();
    let items: Vec<FeatureMatrix> = [2usize, 7, 13, 30]
        .iter()
        .map(|&n| features(&mut rng, n, 4))
        .collect();
    let refs: Vec<&FeatureMatrix> = items.iter().collect();
    let batch = PaddedBatch::from_features(&refs).unwrap();
    let batched = encode_padded_batch(&batch, &model).unwrap();
    for (f, b) in items.iter().zip(&batched) {
        let (alone, _) = encode_caption(f, &model).unwrap();
        assert_eq!(alone.vector, b.vector);
        let padded = f.padded_to(f.n_frames() + 9);
        let (p, _) = encode_caption(&padded, &model).unwrap();
        assert_eq!(alone.vector, p.vector);
    }
}

#[test]
fn taps_have_documented_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = tiny_config();
    let model = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let f = features(&mut rng, 21, 4);
    let (emb, taps) = encode_caption(&f, &model).unwrap();
    let steps = conv_output_len(21, 6, 2, 2).unwrap();
    assert_eq!(taps.n_steps, steps);
    assert_eq!(taps.input.dim(), (21, 4));
    assert_eq!(taps.conv.dim(), (steps, 3));
    assert_eq!(taps.gru.len(), 3);
    for g in &taps.gru {
        assert_eq!(g.dim(), (steps, 8));
    }
    assert_eq!(emb.vector, taps.embedding);
    let norm: f32 = emb.vector.dot(&emb.vector).sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_columns_sum_to_one(t in 1usize..12, d in 1usize..6, n_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + ((t - 1) as f64 * n_frac) as usize;
        let s = rand2(&mut rng, t, d, 30.0);
        let a = softmax_over_time(s.view(), &prefix_mask(t, n)).unwrap();
        for j in 0..d {
            let col: f64 = (0..n).map(|i| a[[i, j]]).sum();
            prop_assert!((col - 1.0).abs() < 1e-6);
            for i in n..t {
                prop_assert_eq!(a[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn normalized_vectors_have_unit_length(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let x = Array1::from(v);
        prop_assume!(x.dot(&x).sqrt() > 1e-6);
        let (y, _) = l2_normalize(x.view()).unwrap();
        prop_assert!((y.dot(&y).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        a in prop::collection::vec(-10f64..10.0, 4),
        b in prop::collection::vec(-10f64..10.0, 4),
        k in 0.01f64..100.0,
    ) {
        let (a, b) = (Array1::from(a), Array1::from(b));
        prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
        let c = cosine_similarity(a.view(), b.view()).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled = a.mapv(|v| v * k);
        let c2 = cosine_similarity(scaled.view(), b.view()).unwrap();
        prop_assert!((c - c2).abs() < 1e-12);
    }

    #[test]
    fn conv_length_formula(t in 2usize..500) {
        let x = Array2::<f64>::zeros((1, t));
        let k = Array3::<f64>::zeros((1, 1, 6));
        let (y, _) = conv1d(x.view(), k.view(), 2, 2).unwrap();
        prop_assert_eq!(y.ncols(), (t + 4 - 6) / 2 + 1);
    }
}

#[test]
fn one_step_after_the_conv_embeds_the_last_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = ModelParams::<f32>::init(&tiny_config(), 5).unwrap();
    // kernel 6, padding 2 on each side: two frames give exactly one step
    let f = features(&mut rng, 2, 4);
    let (emb, taps) = encode_caption(&f, &model).unwrap();
    assert_eq!(taps.n_steps, 1);
    let h = taps.gru[2].row(0).to_owned();
    let norm = h.dot(&h).sqrt();
    for (a, b) in emb.vector.iter().zip(h.iter()) {
        assert!((a - b / norm).abs() < 1e-6);
    }
}
