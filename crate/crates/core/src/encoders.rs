//! Image and caption encoders mapping into the joint embedding space.
//!
//! Image: linear projection of a precomputed feature vector, L2-normalized.
//! Caption: strided conv (no activation) → stacked bidirectional GRUs →
//! vectorial self-attention (softmax over time, per feature) → L2 norm.

use ndarray::{
    s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    bi_gru_backward, bi_gru_forward, conv1d, conv1d_backward, conv_output_len, l2_normalize,
    l2_normalize_backward, linear, linear_backward, prefix_mask, softmax_over_time,
    softmax_over_time_backward, BiGruCache, BiGruParams, Conv1dCache, GruParams, ParamSet,
    Parameters, Real,
};
use crate::frontend::FeatureMatrix;
use crate::{Error, Result};

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 2048-d images, 64 conv channels, 3 x 1024-unit bi-GRU, 128 attention units.
    Paper,
    /// CPU-sized: 16 conv channels, 3 x 64-unit bi-GRU, 16 attention units.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_dim: usize,
    pub feat_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub attn_hidden: usize,
}

impl EncoderConfig {
    pub fn paper(feat_dim: usize) -> Self {
        EncoderConfig {
            image_dim: 2048,
            feat_dim,
            conv_channels: 64,
            conv_kernel: 6,
            conv_stride: 2,
            conv_padding: 2,
            gru_hidden: 1024,
            gru_layers: 3,
            attn_hidden: 128,
        }
    }

    pub fn toy(feat_dim: usize, image_dim: usize) -> Self {
        EncoderConfig {
            image_dim,
            feat_dim,
            conv_channels: 16,
            gru_hidden: 64,
            attn_hidden: 16,
            ..Self::paper(feat_dim)
        }
    }

    pub fn from_preset(preset: Preset, feat_dim: usize, image_dim: usize) -> Self {
        match preset {
            Preset::Paper => EncoderConfig {
                image_dim,
                ..Self::paper(feat_dim)
            },
            Preset::Toy => Self::toy(feat_dim, image_dim),
        }
    }

    /// Joint space dimension: concatenated forward and backward GRU states.
    pub fn embed_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    /// Fewest valid frames the conv layer accepts.
    pub fn min_frames(&self) -> usize {
        self.conv_kernel
            .saturating_sub(2 * self.conv_padding)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_dim,
            self.feat_dim,
            self.conv_channels,
            self.conv_kernel,
            self.conv_stride,
            self.gru_hidden,
            self.gru_layers,
            self.attn_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Recover the architecture from the tensor shapes of a parameter file.
    pub fn infer_from(set: &ParamSet, conv_stride: usize, conv_padding: usize) -> Result<Self> {
        let shape = |name: &str| {
            set.shape(name)
                .ok_or_else(|| Error::Format(format!("parameter file is missing '{name}'")))
        };
        let img = shape("image.w")?;
        let conv = shape("caption.conv.kernel")?;
        let attn = shape("caption.attn.w")?;
        let u = shape("caption.gru1.fwd.u")?;
        let mut layers = 0;
        while set
            .get(&format!("caption.gru{}.fwd.u", layers + 1))
            .is_some()
        {
            layers += 1;
        }
        if img.len() != 2 || conv.len() != 3 || attn.len() != 2 || u.len() != 2 {
            return Err(Error::Format(
                "unexpected tensor ranks in parameter file".into(),
            ));
        }
        Ok(EncoderConfig {
            image_dim: img[1],
            feat_dim: conv[1],
            conv_channels: conv[0],
            conv_kernel: conv[2],
            conv_stride,
            conv_padding,
            gru_hidden: u[1],
            gru_layers: layers,
            attn_hidden: attn[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams<F> {
    /// `embed_dim x image_dim`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Eq. symbols: scores are `V tanh(W h + b_w) + b_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    /// `attn_hidden x embed_dim`
    pub w: Array2<F>,
    pub b_w: Array1<F>,
    /// `embed_dim x attn_hidden`
    pub v: Array2<F>,
    pub b_v: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEncoderParams<F> {
    /// `conv_channels x feat_dim x conv_kernel`
    pub conv: Array3<F>,
    pub gru: Vec<BiGruParams<F>>,
    pub attn: AttentionParams<F>,
    pub conv_stride: usize,
    pub conv_padding: usize,
}

/// All trainable tensors of both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: EncoderConfig,
    pub image: ImageEncoderParams<F>,
    pub caption: CaptionEncoderParams<F>,
}

fn uniform2<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::lit(rng.gen_range(-bound..bound)))
}

pub(crate) fn init_gru<F: Real>(rng: &mut ChaCha8Rng, d_in: usize, hid: usize) -> GruParams<F> {
    GruParams {
        w_x: uniform2(rng, 3 * hid, d_in, d_in),
        u: uniform2(rng, 3 * hid, hid, hid),
        b: Array1::zeros(3 * hid),
    }
}

pub fn init_bi_gru<F: Real>(rng: &mut ChaCha8Rng, d_in: usize, hid: usize) -> BiGruParams<F> {
    let fwd = init_gru(rng, d_in, hid);
    let bwd = init_gru(rng, d_in, hid);
    BiGruParams { fwd, bwd }
}

impl<F: Real> ModelParams<F> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.embed_dim();
        let image = ImageEncoderParams {
            w: uniform2(&mut rng, e, cfg.image_dim, cfg.image_dim),
            b: Array1::zeros(e),
        };
        let fan = cfg.feat_dim * cfg.conv_kernel;
        let bound = 1.0 / (fan as f64).sqrt();
        let conv = Array3::from_shape_simple_fn(
            (cfg.conv_channels, cfg.feat_dim, cfg.conv_kernel),
            || F::lit(rng.gen_range(-bound..bound)),
        );
        let mut gru = Vec::with_capacity(cfg.gru_layers);
        for l in 0..cfg.gru_layers {
            let d_in = if l == 0 { cfg.conv_channels } else { e };
            gru.push(init_bi_gru(&mut rng, d_in, cfg.gru_hidden));
        }
        let attn = AttentionParams {
            w: uniform2(&mut rng, cfg.attn_hidden, e, e),
            b_w: Array1::zeros(cfg.attn_hidden),
            v: uniform2(&mut rng, e, cfg.attn_hidden, cfg.attn_hidden),
            b_v: Array1::zeros(e),
        };
        Ok(ModelParams {
            config: cfg.clone(),
            image,
            caption: CaptionEncoderParams {
                conv,
                gru,
                attn,
                conv_stride: cfg.conv_stride,
                conv_padding: cfg.conv_padding,
            },
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self::init(cfg, 0)?.zeros_like())
    }

    /// Rebuild a model from a parameter file, inferring its architecture.
    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let cfg = EncoderConfig::infer_from(set, 2, 2)?;
        let mut p = Self::zeros(&cfg)?;
        p.load_param_set(set)?;
        Ok(p)
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config).expect("config already validated");
        let src = self.flatten();
        let flat: Vec<G> = src.iter().map(|v| G::lit(v.as_f64())).collect();
        out.assign_flat(&flat);
        out
    }
}

fn push<'a, F, D: ndarray::Dimension>(
    out: &mut Vec<(String, ArrayViewD<'a, F>)>,
    name: String,
    t: &'a ndarray::Array<F, D>,
) {
    out.push((name, t.view().into_dyn()));
}

fn push_mut<'a, F, D: ndarray::Dimension>(
    out: &mut Vec<(String, ArrayViewMutD<'a, F>)>,
    name: String,
    t: &'a mut ndarray::Array<F, D>,
) {
    out.push((name, t.view_mut().into_dyn()));
}

impl<F: Real> Parameters<F> for ModelParams<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        push(&mut out, "image.w".into(), &self.image.w);
        push(&mut out, "image.b".into(), &self.image.b);
        push(&mut out, "caption.conv.kernel".into(), &self.caption.conv);
        for (l, layer) in self.caption.gru.iter().enumerate() {
            for (dir, g) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                let pre = format!("caption.gru{}.{dir}", l + 1);
                push(&mut out, format!("{pre}.w_x"), &g.w_x);
                push(&mut out, format!("{pre}.u"), &g.u);
                push(&mut out, format!("{pre}.b"), &g.b);
            }
        }
        let a = &self.caption.attn;
        push(&mut out, "caption.attn.w".into(), &a.w);
        push(&mut out, "caption.attn.b_w".into(), &a.b_w);
        push(&mut out, "caption.attn.v".into(), &a.v);
        push(&mut out, "caption.attn.b_v".into(), &a.b_v);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        push_mut(&mut out, "image.w".into(), &mut self.image.w);
        push_mut(&mut out, "image.b".into(), &mut self.image.b);
        push_mut(
            &mut out,
            "caption.conv.kernel".into(),
            &mut self.caption.conv,
        );
        for (l, layer) in self.caption.gru.iter_mut().enumerate() {
            for (dir, g) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                let pre = format!("caption.gru{}.{dir}", l + 1);
                push_mut(&mut out, format!("{pre}.w_x"), &mut g.w_x);
                push_mut(&mut out, format!("{pre}.u"), &mut g.u);
                push_mut(&mut out, format!("{pre}.b"), &mut g.b);
            }
        }
        let a = &mut self.caption.attn;
        push_mut(&mut out, "caption.attn.w".into(), &mut a.w);
        push_mut(&mut out, "caption.attn.b_w".into(), &mut a.b_w);
        push_mut(&mut out, "caption.attn.v".into(), &mut a.v);
        push_mut(&mut out, "caption.attn.b_v".into(), &mut a.b_v);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Caption,
}

/// Unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Array1<f32>,
    pub source: Modality,
}

// ---------------------------------------------------------------- image side

#[derive(Debug, Clone)]
pub struct ImagePass<F> {
    pub embedding: Array1<F>,
    input: Array1<F>,
    norm: F,
}

pub fn image_forward<F: Real>(
    feat: ArrayView1<F>,
    p: &ImageEncoderParams<F>,
) -> Result<ImagePass<F>> {
    if feat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("image features contain NaN or Inf".into()));
    }
    let proj = linear(feat, p.w.view(), p.b.view())?;
    let (embedding, norm) = l2_normalize(proj.view())?;
    Ok(ImagePass {
        embedding,
        input: feat.to_owned(),
        norm,
    })
}

/// Gradient of the image parameters given `dL/d embedding`.
pub fn image_backward<F: Real>(
    pass: &ImagePass<F>,
    p: &ImageEncoderParams<F>,
    d_emb: ArrayView1<F>,
) -> ImageEncoderParams<F> {
    let d_proj = l2_normalize_backward(pass.embedding.view(), pass.norm, d_emb);
    let (_, dw, db) = linear_backward(pass.input.view(), p.w.view(), d_proj.view());
    ImageEncoderParams { w: dw, b: db }
}

pub fn encode_image(feat: ArrayView1<f32>, p: &ModelParams<f32>) -> Result<Embedding> {
    Ok(Embedding {
        vector: image_forward(feat, &p.image)?.embedding,
        source: Modality::Image,
    })
}

// ------------------------------------------------------------------ attention

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    hidden: Array2<F>,
    weights: Array2<F>,
}

impl<F: Real> AttentionCache<F> {
    /// Per-feature attention weights, `t x d`.
    pub fn weights(&self) -> &Array2<F> {
        &self.weights
    }
}

/// `Σ_t a_t ∘ h_t` with `a = softmax_t(V tanh(W h_t + b_w) + b_v)` over masked frames.
pub fn attention<F: Real>(
    h: ArrayView2<F>,
    p: &AttentionParams<F>,
    mask: &[bool],
) -> Result<(Array1<F>, AttentionCache<F>)> {
    let (t, d) = h.dim();
    if p.w.ncols() != d || p.v.nrows() != d {
        return Err(Error::Shape(format!(
            "attention: states are {d}-dim, W is {:?}, V is {:?}",
            p.w.dim(),
            p.v.dim()
        )));
    }
    if mask.len() != t {
        return Err(Error::Shape(format!(
            "attention: {t} frames, mask {}",
            mask.len()
        )));
    }
    let mut hidden = (h.dot(&p.w.t()) + &p.b_w).mapv(|v| v.tanh());
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            hidden.row_mut(i).fill(F::zero());
        }
    }
    let scores = hidden.dot(&p.v.t()) + &p.b_v;
    let weights = softmax_over_time(scores.view(), mask)?;
    let out = (&weights * &h).sum_axis(Axis(0));
    Ok((out, AttentionCache { hidden, weights }))
}

/// Returns `dL/dh` and the attention parameter gradients.
pub fn attention_backward<F: Real>(
    h: ArrayView2<F>,
    p: &AttentionParams<F>,
    cache: &AttentionCache<F>,
    d_out: ArrayView1<F>,
) -> (Array2<F>, AttentionParams<F>) {
    let d_row = d_out.insert_axis(Axis(0));
    let mut dh = &cache.weights * &d_row;
    let d_weights = &h * &d_row;
    let d_scores = softmax_over_time_backward(cache.weights.view(), d_weights.view());
    let db_v = d_scores.sum_axis(Axis(0));
    let dv = d_scores.t().dot(&cache.hidden);
    let d_hidden = d_scores.dot(&p.v);
    let d_pre = &d_hidden * &cache.hidden.mapv(|u| F::one() - u * u);
    let db_w = d_pre.sum_axis(Axis(0));
    let dw = d_pre.t().dot(&h);
    dh += &d_pre.dot(&p.w);
    (
        dh,
        AttentionParams {
            w: dw,
            b_w: db_w,
            v: dv,
            b_v: db_v,
        },
    )
}

// ---------------------------------------------------------------- caption side

/// Intermediate activations exposed for probing.
#[derive(Debug, Clone)]
pub struct LayerTaps<F> {
    /// Valid input frames, `frames x feat_dim`.
    pub input: Array2<F>,
    /// Conv output, `steps x conv_channels` (time-major).
    pub conv: Array2<F>,
    /// Bidirectional states per GRU layer, `steps x embed_dim`.
    pub gru: Vec<Array2<F>>,
    /// Valid steps after the conv.
    pub n_steps: usize,
    /// Attention output before normalization.
    pub pooled: Array1<F>,
    pub embedding: Array1<F>,
}

/// Forward state of one caption, sufficient for [`caption_backward`].
#[derive(Debug, Clone)]
pub struct CaptionPass<F> {
    pub taps: LayerTaps<F>,
    conv_cache: Conv1dCache<F>,
    gru_caches: Vec<BiGruCache<F>>,
    attn_cache: AttentionCache<F>,
    norm: F,
}

impl<F: Real> CaptionPass<F> {
    pub fn embedding(&self) -> &Array1<F> {
        &self.taps.embedding
    }

    pub fn attention_weights(&self) -> &Array2<F> {
        self.attn_cache.weights()
    }
}

impl<F: Real> CaptionEncoderParams<F> {
    pub fn conv_kernel(&self) -> ArrayView3<'_, F> {
        self.conv.view()
    }

    /// Conv output as `steps x channels` plus the valid step count.
    pub fn conv_forward(
        &self,
        x: ArrayView2<F>,
        n_valid: usize,
    ) -> Result<(Array2<F>, usize, Conv1dCache<F>)> {
        let (t, d) = x.dim();
        let (_, feat, width) = self.conv.dim();
        if d != feat {
            return Err(Error::Shape(format!(
                "caption encoder expects {feat}-dim features, got {d}"
            )));
        }
        if n_valid > t {
            return Err(Error::Shape(format!("{n_valid} valid frames but {t} rows")));
        }
        let steps = match conv_output_len(n_valid, width, self.conv_stride, self.conv_padding) {
            Some(n) if n_valid > 0 => n,
            _ => {
                return Err(Error::Validation(format!(
                    "caption has {n_valid} valid frames; the conv layer needs at least {}",
                    width.saturating_sub(2 * self.conv_padding).max(1)
                )))
            }
        };
        let mut xm = x.to_owned();
        xm.slice_mut(s![n_valid.., ..]).fill(F::zero());
        let (y, cache) = conv1d(
            xm.t(),
            self.conv.view(),
            self.conv_stride,
            self.conv_padding,
        )?;
        let y = y.t().as_standard_layout().into_owned();
        Ok((y, steps, cache))
    }

    /// Full forward pass over `x` (`frames x feat_dim`) with `n_valid` real frames.
    pub fn forward(&self, x: ArrayView2<F>, n_valid: usize) -> Result<CaptionPass<F>> {
        let (conv_out, steps, conv_cache) = self.conv_forward(x, n_valid)?;
        let mut layer_in = conv_out.clone();
        let mut states = Vec::with_capacity(self.gru.len());
        let mut gru_caches = Vec::with_capacity(self.gru.len());
        for layer in &self.gru {
            let (out, cache) = bi_gru_forward(layer_in.view(), steps, layer)?;
            gru_caches.push(cache);
            states.push(out.clone());
            layer_in = out;
        }
        let mask = prefix_mask(layer_in.nrows(), steps);
        let (pooled, attn_cache) = attention(layer_in.view(), &self.attn, &mask)?;
        let (embedding, norm) = l2_normalize(pooled.view())?;
        Ok(CaptionPass {
            taps: LayerTaps {
                input: x.slice(s![..n_valid, ..]).to_owned(),
                conv: conv_out,
                gru: states,
                n_steps: steps,
                pooled,
                embedding,
            },
            conv_cache,
            gru_caches,
            attn_cache,
            norm,
        })
    }
}

/// Caption parameter gradients given `dL/d embedding`.
pub fn caption_backward<F: Real>(
    pass: &CaptionPass<F>,
    p: &CaptionEncoderParams<F>,
    d_emb: ArrayView1<F>,
) -> CaptionEncoderParams<F> {
    let taps = &pass.taps;
    let d_pooled = l2_normalize_backward(taps.embedding.view(), pass.norm, d_emb);
    let last = taps.gru.last().unwrap_or(&taps.conv);
    let (mut dh, d_attn) =
        attention_backward(last.view(), &p.attn, &pass.attn_cache, d_pooled.view());
    let mut d_gru = Vec::with_capacity(p.gru.len());
    for l in (0..p.gru.len()).rev() {
        let input = if l == 0 { &taps.conv } else { &taps.gru[l - 1] };
        let (dx, g) = bi_gru_backward(input.view(), &p.gru[l], &pass.gru_caches[l], dh.view());
        d_gru.push(g);
        dh = dx;
    }
    d_gru.reverse();
    let (_, d_conv) = conv1d_backward(&pass.conv_cache, p.conv.view(), dh.t());
    CaptionEncoderParams {
        conv: d_conv,
        gru: d_gru,
        attn: d_attn,
        conv_stride: p.conv_stride,
        conv_padding: p.conv_padding,
    }
}

impl<F: Real> CaptionEncoderParams<F> {
    /// `self += other` for gradient accumulation.
    pub fn accumulate(&mut self, other: &CaptionEncoderParams<F>) {
        self.conv += &other.conv;
        for (a, b) in self.gru.iter_mut().zip(&other.gru) {
            for (x, y) in [(&mut a.fwd, &b.fwd), (&mut a.bwd, &b.bwd)] {
                x.w_x += &y.w_x;
                x.u += &y.u;
                x.b += &y.b;
            }
        }
        self.attn.w += &other.attn.w;
        self.attn.b_w += &other.attn.b_w;
        self.attn.v += &other.attn.v;
        self.attn.b_v += &other.attn.b_v;
    }
}

impl<F: Real> ImageEncoderParams<F> {
    pub fn accumulate(&mut self, other: &ImageEncoderParams<F>) {
        self.w += &other.w;
        self.b += &other.b;
    }
}

/// Encode one caption, returning its embedding and the per-layer taps.
pub fn encode_caption(
    feat: &FeatureMatrix,
    p: &ModelParams<f32>,
) -> Result<(Embedding, LayerTaps<f32>)> {
    let pass = p.caption.forward(feat.data.view(), feat.n_valid_frames)?;
    let taps = pass.taps;
    Ok((
        Embedding {
            vector: taps.embedding.clone(),
            source: Modality::Caption,
        },
        taps,
    ))
}

/// Right-padded batch of feature matrices with per-item valid lengths.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `batch x max_frames x feat_dim`
    pub data: Array3<f32>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_features(items: &[&FeatureMatrix]) -> Result<Self> {
        let max_t = items.iter().map(|f| f.n_frames()).max().unwrap_or(0);
        let dims = items.first().map(|f| f.n_dims()).unwrap_or(0);
        let mut data = Array3::zeros((items.len(), max_t, dims));
        let mut lengths = Vec::with_capacity(items.len());
        for (b, f) in items.iter().enumerate() {
            if f.n_dims() != dims {
                return Err(Error::Shape(
                    "batch items have different feature dims".into(),
                ));
            }
            data.slice_mut(s![b, ..f.n_frames(), ..]).assign(&f.data);
            lengths.push(f.n_valid_frames);
        }
        Ok(PaddedBatch { data, lengths })
    }
}

pub fn encode_padded_batch(batch: &PaddedBatch, p: &ModelParams<f32>) -> Result<Vec<Embedding>> {
    batch
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            let pass = p.caption.forward(batch.data.index_axis(Axis(0), b), n)?;
            Ok(Embedding {
                vector: pass.taps.embedding,
                source: Modality::Caption,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_attention() -> AttentionParams<f64> {
        AttentionParams {
            w: array![[1.0]],
            b_w: array![0.0],
            v: array![[1.0]],
            b_v: array![0.0],
        }
    }

    #[test]
    fn scalar_attention_hand_value() {
        let h = array![[1.0], [3.0]];
        let (out, _) = attention(h.view(), &scalar_attention(), &[true, true]).unwrap();
        let (e1, e3) = (1f64.tanh().exp(), 3f64.tanh().exp());
        let expected = (e1 * 1.0 + e3 * 3.0) / (e1 + e3);
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[0] - 2.1162).abs() < 1e-4);
    }

    #[test]
    fn identical_states_average_to_themselves() {
        let row = array![0.5, -1.25, 2.0];
        let h = Array2::from_shape_fn((4, 3), |(_, j)| row[j]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams {
            w: uniform2::<f64>(&mut rng, 2, 3, 3),
            b_w: array![0.1, -0.1],
            v: uniform2(&mut rng, 3, 2, 2),
            b_v: array![0.0, 0.3, 0.0],
        };
        let (out, cache) = attention(h.view(), &p, &[true; 4]).unwrap();
        for j in 0..3 {
            assert!((out[j] - row[j]).abs() < 1e-12);
            assert!((cache.weights().column(j).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_preset_shapes() {
        let cfg = EncoderConfig::toy(39, 128);
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(p.image.w.dim(), (128, 128));
        assert_eq!(p.caption.conv.dim(), (16, 39, 6));
        assert_eq!(p.caption.gru[0].fwd.w_x.dim(), (192, 16));
        assert_eq!(p.caption.gru[1].fwd.w_x.dim(), (192, 128));
        assert_eq!(p.caption.attn.w.dim(), (16, 128));
        assert_eq!(p.caption.attn.v.dim(), (128, 16));
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 3 + 3 * 2 * 3 + 4);
        let back = ModelParams::<f32>::from_param_set(&p.to_param_set()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn paper_preset_shapes() {
        let cfg = EncoderConfig::paper(39);
        assert_eq!(cfg.embed_dim(), 2048);
        assert_eq!(cfg.attn_hidden, 128);
        assert_eq!(cfg.conv_channels, 64);
    }

    #[test]
    fn zero_gru_params_fail_normalization() {
        let cfg = EncoderConfig::toy(5, 4);
        let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        for layer in &mut p.caption.gru {
            layer.fwd = GruParams::zeros(layer.fwd.input_dim(), cfg.gru_hidden);
            layer.bwd = GruParams::zeros(layer.bwd.input_dim(), cfg.gru_hidden);
        }
        let x = Array2::from_elem((10, 5), 0.3);
        assert!(matches!(
            p.caption.forward(x.view(), 10),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn too_few_frames() {
        let cfg = EncoderConfig::toy(5, 4);
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let x = Array2::from_elem((1, 5), 0.3);
        assert!(p.caption.forward(x.view(), 1).is_err());
    }
}
