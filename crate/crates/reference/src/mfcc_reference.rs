//! A slow, self-contained MFCC pipeline: direct DFT, its own mel
//! filterbank, DCT and regression deltas. Nothing here calls the front end
//! under test.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SR: f64 = 16_000.0;
pub const WIN: usize = 400;
pub const SHIFT: usize = 80;
pub const NFFT: usize = 512;
pub const NMEL: usize = 40;

pub fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

pub fn reference_static(samples: &[f32]) -> Vec<[f64; 13]> {
    let n_frames = (samples.len() - WIN) / SHIFT + 1;
    let top = mel(SR / 2.0);
    let edge: Vec<f64> = (0..NMEL + 2)
        .map(|i| inv_mel(top * i as f64 / (NMEL + 1) as f64))
        .collect();
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let x: Vec<f64> = samples[f * SHIFT..f * SHIFT + WIN]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let mut y = vec![0.0; WIN];
        for i in 0..WIN {
            let prev = if i > 0 { x[i - 1] } else { x[0] };
            let ham = 0.54 - 0.46 * (2.0 * PI * i as f64 / (WIN as f64 - 1.0)).cos();
            y[i] = (x[i] - 0.97 * prev) * ham;
        }
        let mut power = vec![0.0; NFFT / 2 + 1];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in y.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / NFFT as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            *p = re * re + im * im;
        }
        let mut logmel = [0.0f64; NMEL];
        for (m, lm) in logmel.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &p) in power.iter().enumerate() {
                let hz = k as f64 * SR / NFFT as f64;
                let w = if hz > edge[m] && hz <= edge[m + 1] {
                    (hz - edge[m]) / (edge[m + 1] - edge[m])
                } else if hz > edge[m + 1] && hz < edge[m + 2] {
                    (edge[m + 2] - hz) / (edge[m + 2] - edge[m + 1])
                } else {
                    0.0
                };
                acc += w * p;
            }
            *lm = acc.max(1e-10).ln();
        }
        let mut row = [0.0f64; 13];
        row[0] = energy.max(1e-10).ln();
        for q in 1..=12 {
            row[q] = (0..NMEL)
                .map(|m| {
                    (2.0 / NMEL as f64).sqrt()
                        * (PI * q as f64 * (m as f64 + 0.5) / NMEL as f64).cos()
                        * logmel[m]
                })
                .sum();
        }
        out.push(row);
    }
    out
}

pub fn reference_deltas(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as isize;
    let at = |t: isize| &x[t.clamp(0, n - 1) as usize];
    (0..n)
        .map(|t| {
            (0..x[0].len())
                .map(|j| {
                    let num = (at(t + 1)[j] - at(t - 1)[j]) + 2.0 * (at(t + 2)[j] - at(t - 2)[j]);
                    num / 10.0
                })
                .collect()
        })
        .collect()
}

pub fn reference_features(samples: &[f32]) -> Vec<Vec<f64>> {
    let st: Vec<Vec<f64>> = reference_static(samples)
        .iter()
        .map(|r| r.to_vec())
        .collect();
    let d1 = reference_deltas(&st);
    let d2 = reference_deltas(&d1);
    st.iter()
        .zip(&d1)
        .zip(&d2)
        .map(|((a, b), c)| a.iter().chain(b).chain(c).copied().collect())
        .collect()
}

pub fn test_signal(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = i as f64 / SR;
            let chirp = (2.0 * PI * (200.0 * t + 1500.0 * t * t)).sin();
            (0.4 * chirp + 0.05 * rng.gen_range(-1.0..1.0)) as f32
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
