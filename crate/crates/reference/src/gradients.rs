//! Finite-difference checks of every differentiable op and of both encoders,
//! in f64 over many random configurations.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2i_core::autodiff::{
    bi_gru_backward, bi_gru_forward, conv1d, conv1d_backward, cosine_similarity,
    cosine_similarity_backward, grad_check, gru_layer, gru_layer_backward, l2_normalize,
    l2_normalize_backward, linear, linear_backward, softmax_over_time, softmax_over_time_backward,
    BiGruParams, Direction, GradCheckConfig, GradCheckReport, GruParams, Parameters,
};
use s2i_core::encoders::{
    attention, attention_backward, caption_backward, image_backward, image_forward,
    AttentionParams, EncoderConfig, ModelParams,
};
use s2i_core::objective::{hinge_loss, LossConfig, PairBatch};

pub struct OpSummary {
    pub op: &'static str,
    pub configs: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl OpSummary {
    fn new(op: &'static str) -> Self {
        OpSummary {
            op,
            configs: 0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, trial: usize, r: GradCheckReport) {
        self.configs += 1;
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
        if !r.passed {
            self.failures.push(format!(
                "trial {trial}: rel err {:.3e} at {:?} {}",
                r.max_rel_err,
                r.worst_index,
                r.failure.unwrap_or_default()
            ));
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err < tol
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn arr1(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

fn arr2(v: &[f64], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), v.to_vec()).unwrap()
}

fn dot(a: &[f64], b: impl IntoIterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

pub fn check_linear(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("linear");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let (n_in, n_out) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let x = rand_vec(&mut rng, n_in + n_out * n_in + n_out, 1.0);
        let r = rand_vec(&mut rng, n_out, 1.0);
        let split = |v: &[f64]| {
            (
                arr1(&v[..n_in]),
                arr2(&v[n_in..n_in + n_out * n_in], n_out, n_in),
                arr1(&v[n_in + n_out * n_in..]),
            )
        };
        let f = |v: &[f64]| {
            let (xv, w, b) = split(v);
            linear(xv.view(), w.view(), b.view()).map(|y| dot(&r, y.iter().copied()))
        };
        let (xv, w, _) = split(&x);
        let (dx, dw, db) = linear_backward(xv.view(), w.view(), arr1(&r).view());
        let grad: Vec<f64> = dx
            .iter()
            .chain(dw.iter())
            .chain(db.iter())
            .copied()
            .collect();
        s.record(t, grad_check(f, &x, &grad, &cfg()));
    }
    s
}

pub fn check_conv1d(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("conv1d");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let c_in = rng.gen_range(1..=4);
        let c_out = rng.gen_range(1..=4);
        let k: usize = rng.gen_range(1..=6);
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..=2);
        let len = rng.gen_range((k.saturating_sub(2 * pad)).max(1)..=9);
        let nx = c_in * len;
        let v = rand_vec(&mut rng, nx + c_out * c_in * k, 1.0);
        let split = |v: &[f64]| {
            (
                arr2(&v[..nx], c_in, len),
                Array3::from_shape_vec((c_out, c_in, k), v[nx..].to_vec()).unwrap(),
            )
        };
        let (x0, k0) = split(&v);
        let (y0, cache) = conv1d(x0.view(), k0.view(), stride, pad).unwrap();
        let r = rand_vec(&mut rng, y0.len(), 1.0);
        let f = |v: &[f64]| {
            let (x, kk) = split(v);
            conv1d(x.view(), kk.view(), stride, pad).map(|(y, _)| dot(&r, y.iter().copied()))
        };
        let dy = Array2::from_shape_vec(y0.raw_dim(), r.clone()).unwrap();
        let (dx, dk) = conv1d_backward(&cache, k0.view(), dy.view());
        let grad: Vec<f64> = dx.iter().chain(dk.iter()).copied().collect();
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

fn gru_from(v: &[f64], d_in: usize, hid: usize) -> (GruParams<f64>, usize) {
    let a = 3 * hid * d_in;
    let b = a + 3 * hid * hid;
    let p = GruParams {
        w_x: arr2(&v[..a], 3 * hid, d_in),
        u: arr2(&v[a..b], 3 * hid, hid),
        b: arr1(&v[b..b + 3 * hid]),
    };
    (p, b + 3 * hid)
}

fn gru_flat(g: &GruParams<f64>) -> Vec<f64> {
    g.w_x
        .iter()
        .chain(g.u.iter())
        .chain(g.b.iter())
        .copied()
        .collect()
}

pub fn check_gru(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("gru_layer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d_in = rng.gen_range(1..=4);
        let hid = rng.gen_range(1..=4);
        let len = rng.gen_range(1..=6);
        let n_valid = rng.gen_range(1..=len);
        let dir = if t % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let n_params = 3 * hid * (d_in + hid + 1);
        let v = rand_vec(&mut rng, n_params + len * d_in, 1.0);
        let r = rand_vec(&mut rng, len * hid, 1.0);
        let split = |v: &[f64]| {
            let (p, used) = gru_from(v, d_in, hid);
            (p, arr2(&v[used..], len, d_in))
        };
        let f = |v: &[f64]| {
            let (p, x) = split(v);
            gru_layer(x.view(), n_valid, &p, dir).map(|(h, _)| dot(&r, h.iter().copied()))
        };
        let (p, x) = split(&v);
        let (_, cache) = gru_layer(x.view(), n_valid, &p, dir).unwrap();
        let dout = arr2(&r, len, hid);
        let (dx, g) = gru_layer_backward(x.view(), &p, &cache, dout.view());
        let mut grad = gru_flat(&g);
        grad.extend(dx.iter());
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

pub fn check_bi_gru(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("bi_gru");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d_in = rng.gen_range(1..=3);
        let hid = rng.gen_range(1..=3);
        let len = rng.gen_range(1..=5);
        let n_valid = rng.gen_range(1..=len);
        let n_params = 3 * hid * (d_in + hid + 1);
        let v = rand_vec(&mut rng, 2 * n_params + len * d_in, 1.0);
        let r = rand_vec(&mut rng, len * 2 * hid, 1.0);
        let split = |v: &[f64]| {
            let (fwd, a) = gru_from(v, d_in, hid);
            let (bwd, b) = gru_from(&v[a..], d_in, hid);
            (BiGruParams { fwd, bwd }, arr2(&v[a + b..], len, d_in))
        };
        let f = |v: &[f64]| {
            let (p, x) = split(v);
            bi_gru_forward(x.view(), n_valid, &p).map(|(h, _)| dot(&r, h.iter().copied()))
        };
        let (p, x) = split(&v);
        let (_, cache) = bi_gru_forward(x.view(), n_valid, &p).unwrap();
        let (dx, g) = bi_gru_backward(x.view(), &p, &cache, arr2(&r, len, 2 * hid).view());
        let mut grad = gru_flat(&g.fwd);
        grad.extend(gru_flat(&g.bwd));
        grad.extend(dx.iter());
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

pub fn check_softmax(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("softmax_over_time");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let len = rng.gen_range(1..=7);
        let d = rng.gen_range(1..=5);
        let n_valid = rng.gen_range(1..=len);
        let mask: Vec<bool> = (0..len).map(|i| i < n_valid).collect();
        let v = rand_vec(&mut rng, len * d, 2.0);
        let r = rand_vec(&mut rng, len * d, 1.0);
        let f = |v: &[f64]| {
            softmax_over_time(arr2(v, len, d).view(), &mask).map(|a| dot(&r, a.iter().copied()))
        };
        let a = softmax_over_time(arr2(&v, len, d).view(), &mask).unwrap();
        let ds = softmax_over_time_backward(a.view(), arr2(&r, len, d).view());
        let grad: Vec<f64> = ds.iter().copied().collect();
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

pub fn check_l2_normalize(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("l2_normalize");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d = if t == 0 { 16 } else { rng.gen_range(1..=16) };
        let v = rand_vec(&mut rng, d, 1.0);
        let r = rand_vec(&mut rng, d, 1.0);
        let f = |v: &[f64]| l2_normalize(arr1(v).view()).map(|(y, _)| dot(&r, y.iter().copied()));
        let (y, n) = l2_normalize(arr1(&v).view()).unwrap();
        let g = l2_normalize_backward(y.view(), n, arr1(&r).view());
        s.record(t, grad_check(f, &v, g.as_slice().unwrap(), &cfg()));
    }
    s
}

pub fn check_cosine(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("cosine_similarity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d = rng.gen_range(1..=10);
        let v = rand_vec(&mut rng, 2 * d, 1.0);
        let f = |v: &[f64]| cosine_similarity(arr1(&v[..d]).view(), arr1(&v[d..]).view());
        let (da, db) = cosine_similarity_backward(arr1(&v[..d]).view(), arr1(&v[d..]).view(), 1.0);
        let grad: Vec<f64> = da.iter().chain(db.iter()).copied().collect();
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

pub fn check_attention(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("attention");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let len = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=5);
        let a = rng.gen_range(1..=4);
        let n_valid = rng.gen_range(1..=len);
        let mask: Vec<bool> = (0..len).map(|i| i < n_valid).collect();
        let sizes = [a * d, a, d * a, d, len * d];
        let v = rand_vec(&mut rng, sizes.iter().sum(), 1.0);
        let r = rand_vec(&mut rng, d, 1.0);
        let split = |v: &[f64]| {
            let mut o = 0;
            let mut take = |n: usize| {
                let out = v[o..o + n].to_vec();
                o += n;
                out
            };
            let p = AttentionParams {
                w: arr2(&take(a * d), a, d),
                b_w: arr1(&take(a)),
                v: arr2(&take(d * a), d, a),
                b_v: arr1(&take(d)),
            };
            let mut h = arr2(&take(len * d), len, d);
            for i in n_valid..len {
                h.row_mut(i).fill(0.0);
            }
            (p, h)
        };
        let f = |v: &[f64]| {
            let (p, h) = split(v);
            attention(h.view(), &p, &mask).map(|(o, _)| dot(&r, o.iter().copied()))
        };
        let (p, h) = split(&v);
        let (_, cache) = attention(h.view(), &p, &mask).unwrap();
        let (mut dh, g) = attention_backward(h.view(), &p, &cache, arr1(&r).view());
        // padded rows are forced to zero by `split`, so their true gradient is zero
        for i in n_valid..len {
            dh.row_mut(i).fill(0.0);
        }
        let grad: Vec<f64> =
            g.w.iter()
                .chain(g.b_w.iter())
                .chain(g.v.iter())
                .chain(g.b_v.iter())
                .chain(dh.iter())
                .copied()
                .collect();
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    EncoderConfig {
        image_dim: rng.gen_range(2..=4),
        feat_dim: rng.gen_range(2..=4),
        conv_channels: rng.gen_range(2..=3),
        conv_kernel: 6,
        conv_stride: 2,
        conv_padding: 2,
        gru_hidden: rng.gen_range(1..=3),
        gru_layers: 3,
        attn_hidden: rng.gen_range(1..=3),
    }
}

/// Whole caption encoder (conv, 3 bi-GRU layers, attention, normalization)
/// on a 10-frame input, differentiated with respect to every parameter.
pub fn check_caption_encoder(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("caption_encoder");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let ecfg = tiny_encoder(&mut rng);
        let mut p = ModelParams::<f64>::init(&ecfg, rng.gen()).unwrap();
        // larger-than-default weights so every gate is away from the linear regime
        p.scale(2.0);
        let frames = 10;
        let n_valid = rng.gen_range(6..=10);
        let x = arr2(
            &rand_vec(&mut rng, frames * ecfg.feat_dim, 1.0),
            frames,
            ecfg.feat_dim,
        );
        let r = rand_vec(&mut rng, ecfg.embed_dim(), 1.0);
        let theta = p.flatten();
        let f = |v: &[f64]| {
            let mut q = p.clone();
            q.assign_flat(v);
            q.caption
                .forward(x.view(), n_valid)
                .map(|pass| dot(&r, pass.embedding().iter().copied()))
        };
        let pass = p.caption.forward(x.view(), n_valid).unwrap();
        let mut grads = p.zeros_like();
        grads.caption = caption_backward(&pass, &p.caption, arr1(&r).view());
        s.record(t, grad_check(f, &theta, &grads.flatten(), &cfg()));
    }
    s
}

pub fn check_image_encoder(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("image_encoder");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let ecfg = tiny_encoder(&mut rng);
        let p = ModelParams::<f64>::init(&ecfg, rng.gen()).unwrap();
        let feat = arr1(&rand_vec(&mut rng, ecfg.image_dim, 1.0));
        let r = rand_vec(&mut rng, ecfg.embed_dim(), 1.0);
        let f = |v: &[f64]| {
            let mut q = p.clone();
            q.assign_flat(v);
            image_forward(feat.view(), &q.image).map(|o| dot(&r, o.embedding.iter().copied()))
        };
        let pass = image_forward(feat.view(), &p.image).unwrap();
        let mut grads = p.zeros_like();
        grads.image = image_backward(&pass, &p.image, arr1(&r).view());
        s.record(t, grad_check(f, &p.flatten(), &grads.flatten(), &cfg()));
    }
    s
}

/// True when no hinge term or hard-negative cut is within `slack` of a kink.
pub fn away_from_kinks(sims: &Array2<f64>, loss: &LossConfig, slack: f64) -> bool {
    let n = sims.nrows();
    let m = loss.negatives_per_anchor(n);
    for k in 0..n {
        for dir in 0..2 {
            let mut vals: Vec<f64> = (0..n)
                .filter(|&j| j != k)
                .map(|j| if dir == 0 { sims[[k, j]] } else { sims[[j, k]] })
                .collect();
            for &v in &vals {
                if (v - sims[[k, k]] + loss.margin).abs() <= slack {
                    return false;
                }
            }
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if m < vals.len() && (vals[m - 1] - vals[m]).abs() <= slack {
                return false;
            }
        }
    }
    true
}

pub fn check_hinge_loss(trials: usize, seed: u64) -> OpSummary {
    let mut s = OpSummary::new("hinge_loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0;
    while s.configs < trials {
        t += 1;
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=6);
        let loss = LossConfig {
            margin: 0.2,
            hard_fraction: [0.25, 0.5, 1.0][t % 3],
        };
        let v = rand_vec(&mut rng, 2 * n * d, 1.0);
        let build = |v: &[f64]| {
            let caps = (0..n).map(|k| arr1(&v[k * d..(k + 1) * d])).collect();
            let imgs = (0..n)
                .map(|k| arr1(&v[(n + k) * d..(n + k + 1) * d]))
                .collect();
            PairBatch::new(caps, imgs).unwrap()
        };
        let batch = build(&v);
        if !away_from_kinks(&batch.similarities().unwrap(), &loss, 1e-3) {
            continue;
        }
        let out = hinge_loss(&batch, &loss).unwrap();
        let grad: Vec<f64> = out
            .d_captions
            .iter()
            .chain(out.d_images.iter())
            .flat_map(|a| a.iter().copied())
            .collect();
        let f = |v: &[f64]| hinge_loss(&build(v), &loss).map(|o| o.loss);
        s.record(t, grad_check(f, &v, &grad, &cfg()));
    }
    s
}

/// Every differentiable op plus both encoders, `configs` random configurations each.
pub fn full_gradient_suite(configs: usize) -> Vec<OpSummary> {
    vec![
        check_linear(configs, 1),
        check_conv1d(configs, 2),
        check_gru(configs, 3),
        check_bi_gru(configs, 4),
        check_softmax(configs, 5),
        check_l2_normalize(configs, 6),
        check_cosine(configs, 7),
        check_attention(configs, 8),
        check_hinge_loss(configs, 9),
        check_image_encoder(configs, 10),
        check_caption_encoder(configs, 11),
    ]
}
