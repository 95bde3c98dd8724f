//! MFCC front end: 25 ms Hamming windows every 5 ms, 40 mel filters, 12
//! cepstra plus log energy, then first and second order deltas (39 dims).

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Waveform {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Mfcc39,
    External,
}

/// Per-utterance features, `frames x dims`. Rows at or beyond
/// `n_valid_frames` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub n_valid_frames: usize,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>, n_valid_frames: usize, kind: FeatureKind) -> Result<Self> {
        let f = FeatureMatrix {
            data,
            n_valid_frames,
            kind,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn external(data: Array2<f32>) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, n, FeatureKind::External)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == FeatureKind::Mfcc39 && self.n_dims() != 39 {
            return Err(Error::Validation(format!(
                "mfcc39 features must have 39 dims, got {}",
                self.n_dims()
            )));
        }
        if self.n_valid_frames > self.n_frames() {
            return Err(Error::Validation(format!(
                "{} valid frames but only {} allocated",
                self.n_valid_frames,
                self.n_frames()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.data.ncols()
    }

    /// Copy padded with zero rows up to `frames`.
    pub fn padded_to(&self, frames: usize) -> FeatureMatrix {
        let mut data = Array2::zeros((frames.max(self.n_frames()), self.n_dims()));
        data.slice_mut(s![..self.n_frames(), ..]).assign(&self.data);
        FeatureMatrix {
            data,
            n_valid_frames: self.n_valid_frames,
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_len_ms: f64,
    pub win_shift_ms: f64,
    pub n_mel: usize,
    pub n_cepstra: usize,
    pub include_log_energy: bool,
    /// 0, 1 or 2.
    pub delta_order: usize,
    /// Regression half-width for deltas.
    pub delta_window: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    /// Per-utterance cepstral mean and variance normalization.
    pub cmvn: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            win_len_ms: 25.0,
            win_shift_ms: 5.0,
            n_mel: 40,
            n_cepstra: 12,
            include_log_energy: true,
            delta_order: 2,
            delta_window: 2,
            fft_size: 512,
            preemphasis: 0.97,
            log_floor: 1e-10,
            cmvn: false,
        }
    }
}

impl FrontendConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_len_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.win_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn base_dims(&self) -> usize {
        self.n_cepstra + usize::from(self.include_log_energy)
    }

    pub fn output_dims(&self) -> usize {
        self.base_dims() * (1 + self.delta_order)
    }

    pub fn validate(&self) -> Result<()> {
        let (win, shift) = (self.win_samples(), self.shift_samples());
        if self.sample_rate == 0 || win == 0 || shift == 0 {
            return Err(Error::Config(
                "window and shift must be at least one sample".into(),
            ));
        }
        if shift > win {
            return Err(Error::Config(format!(
                "window shift ({shift} samples) exceeds window length ({win})"
            )));
        }
        if self.fft_size < win {
            return Err(Error::Config(format!(
                "fft_size {} is shorter than the {win}-sample window",
                self.fft_size
            )));
        }
        if self.n_mel == 0 || self.n_cepstra == 0 || self.n_cepstra >= self.n_mel {
            return Err(Error::Config(format!(
                "need 0 < n_cepstra ({}) < n_mel ({})",
                self.n_cepstra, self.n_mel
            )));
        }
        if self.delta_order > 2 {
            return Err(Error::Config("delta_order must be 0, 1 or 2".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Framed signal: the raw samples of every frame and the pre-emphasized,
/// Hamming-windowed version that feeds the spectrum.
#[derive(Debug, Clone)]
pub struct Frames {
    pub raw: Array2<f64>,
    pub windowed: Array2<f64>,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }
}

pub fn frame_count(n_samples: usize, win: usize, shift: usize) -> Option<usize> {
    (n_samples >= win && shift > 0).then(|| (n_samples - win) / shift + 1)
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<Frames> {
    w.validate()?;
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Validation(format!(
            "waveform is {} Hz but the front end expects {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let (win, shift) = (cfg.win_samples(), cfg.shift_samples());
    let n = frame_count(w.samples.len(), win, shift).ok_or_else(|| {
        Error::Validation(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        ))
    })?;
    let window = hamming(win);
    let mut raw = Array2::zeros((n, win));
    let mut windowed = Array2::zeros((n, win));
    for f in 0..n {
        let seg = &w.samples[f * shift..f * shift + win];
        for i in 0..win {
            let x = seg[i] as f64;
            let prev = if i == 0 { x } else { seg[i - 1] as f64 };
            raw[[f, i]] = x;
            windowed[[f, i]] = (x - cfg.preemphasis * prev) * window[i];
        }
    }
    Ok(Frames { raw, windowed })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed FFT plan, mel filterbank and DCT basis.
pub struct MfccAnalyzer {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mel x (fft_size / 2 + 1)`
    filterbank: Array2<f64>,
    /// Rows are DCT-II basis vectors for coefficients `1..=n_cepstra`.
    dct: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MfccAnalyzer {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let sr = cfg.sample_rate as f64;
        let mel_hi = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..cfg.n_mel + 2)
            .map(|i| mel_to_hz(mel_hi * i as f64 / (cfg.n_mel + 1) as f64))
            .collect();
        let mut filterbank = Array2::zeros((cfg.n_mel, n_bins));
        for m in 0..cfg.n_mel {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sr / n_fft as f64;
                let wgt = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                filterbank[[m, k]] = wgt;
            }
        }
        let n_mel = cfg.n_mel as f64;
        let mut dct = Array2::zeros((cfg.n_cepstra, cfg.n_mel));
        for q in 0..cfg.n_cepstra {
            let coef = q + 1;
            for m in 0..cfg.n_mel {
                dct[[q, m]] =
                    (2.0 / n_mel).sqrt() * (PI * coef as f64 * (m as f64 + 0.5) / n_mel).cos();
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MfccAnalyzer {
            cfg: cfg.clone(),
            fft,
            filterbank,
            dct,
            centers_hz: edges[1..=cfg.n_mel].to_vec(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    /// `|X_k|^2` for `k = 0..=fft_size/2` of a zero-padded windowed frame.
    pub fn power_spectrum(&self, windowed: ArrayView1<f64>) -> Vec<f64> {
        let n_fft = self.cfg.fft_size;
        let mut buf: Vec<Complex<f64>> = (0..n_fft)
            .map(|i| Complex::new(windowed.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn filterbank_energies(&self, windowed: ArrayView1<f64>) -> Vec<f64> {
        let power = self.power_spectrum(windowed);
        self.filterbank
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&power).map(|(w, p)| w * p).sum())
            .collect()
    }

    /// Static coefficients for one frame: `[log energy, c1..c_n]`, or just
    /// the cepstra when log energy is disabled.
    pub fn analyze_frame(&self, raw: ArrayView1<f64>, windowed: ArrayView1<f64>) -> Vec<f64> {
        let floor = self.cfg.log_floor;
        let log_fb: Vec<f64> = self
            .filterbank_energies(windowed)
            .into_iter()
            .map(|e| e.max(floor).ln())
            .collect();
        let mut out = Vec::with_capacity(self.cfg.base_dims());
        if self.cfg.include_log_energy {
            let energy: f64 = raw.iter().map(|v| v * v).sum();
            out.push(energy.max(floor).ln());
        }
        for row in self.dct.rows() {
            out.push(row.iter().zip(&log_fb).map(|(a, b)| a * b).sum());
        }
        out
    }

    /// Static coefficients for every frame, in `f64`.
    pub fn mfcc(&self, frames: &Frames) -> Array2<f64> {
        let mut out = Array2::zeros((frames.len(), self.cfg.base_dims()));
        for (f, mut row) in out.rows_mut().into_iter().enumerate() {
            let v = self.analyze_frame(frames.raw.row(f), frames.windowed.row(f));
            row.assign(&ArrayView1::from(&v));
        }
        out
    }
}

/// Static MFCCs (12 cepstra + log energy) as a feature matrix.
pub fn mfcc(frames: &Frames, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let analyzer = MfccAnalyzer::new(cfg)?;
    let data = analyzer.mfcc(frames).mapv(|v| v as f32);
    FeatureMatrix::new(data, frames.len(), FeatureKind::External)
}

/// Regression deltas over `±window` frames with edge replication.
pub fn deltas(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let denom: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = Array2::zeros((n, d));
    if n == 0 || window == 0 {
        return out;
    }
    let clamp = |t: isize| t.clamp(0, n as isize - 1) as usize;
    for t in 0..n {
        for k in 1..=window {
            let fwd = clamp(t as isize + k as isize);
            let bwd = clamp(t as isize - k as isize);
            for j in 0..d {
                out[[t, j]] += k as f64 * (x[[fwd, j]] - x[[bwd, j]]);
            }
        }
    }
    out.mapv_inplace(|v| v / denom);
    out
}

fn append_deltas(base: Array2<f64>, order: usize, window: usize) -> Array2<f64> {
    let mut blocks = vec![base];
    for _ in 0..order {
        let next = deltas(blocks.last().expect("non-empty"), window);
        blocks.push(next);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("equal frame counts")
}

/// Append first and second order deltas to a 13-dim static matrix.
pub fn add_deltas(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f.n_valid_frames == 0 {
        return Err(Error::Validation(
            "add_deltas needs at least one frame".into(),
        ));
    }
    if f.n_dims() != 13 {
        return Err(Error::Shape(format!(
            "add_deltas expects 13 static dims, got {}",
            f.n_dims()
        )));
    }
    let base = f.data.slice(s![..f.n_valid_frames, ..]).mapv(|v| v as f64);
    let full = append_deltas(base, 2, 2).mapv(|v| v as f32);
    FeatureMatrix::new(full, f.n_valid_frames, FeatureKind::Mfcc39)
}

fn apply_cmvn(x: &mut Array2<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        col.mapv_inplace(|v| (v - mean) / sd);
    }
}

/// Full pipeline from waveform to feature matrix.
pub fn extract_features(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let analyzer = MfccAnalyzer::new(cfg)?;
    extract_with(&analyzer, w)
}

/// [`extract_features`] with a reusable analyzer.
pub fn extract_with(analyzer: &MfccAnalyzer, w: &Waveform) -> Result<FeatureMatrix> {
    let cfg = analyzer.config();
    let frames = frame_signal(w, cfg)?;
    let base = analyzer.mfcc(&frames);
    let mut full = append_deltas(base, cfg.delta_order, cfg.delta_window);
    if cfg.cmvn {
        apply_cmvn(&mut full);
    }
    let kind = if full.ncols() == 39 {
        FeatureKind::Mfcc39
    } else {
        FeatureKind::External
    };
    let n = full.nrows();
    FeatureMatrix::new(full.mapv(|v| v as f32), n, kind)
}
