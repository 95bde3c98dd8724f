//! Synthetic spoken-caption corpus. Every word is a fixed tone burst, every
//! image a random projection of its bag of words.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_wav, ImageFeatureTable, ManifestEntry, Split, WAV_SAMPLE_RATE};
use crate::frontend::Waveform;
use crate::{Error, Result};

pub const TOY_WORD_PREFIX: &str = "word";

const BASE_HZ: f64 = 300.0;
const STEP_HZ: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub n_images: usize,
    pub vocab_size: usize,
    pub caption_len_range: (usize, usize),
    pub captions_per_image: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub word_ms: u32,
    pub tone_amplitude: f32,
    pub noise_amplitude: f32,
    pub image_dim: usize,
    pub dev_images: usize,
    pub test_images: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec::new(200, 20, 1)
    }
}

impl ToyCorpusSpec {
    /// Captions of 3 to 6 words, five per image; half the images are held
    /// out for test and a tenth for dev.
    pub fn new(n_images: usize, vocab_size: usize, seed: u64) -> Self {
        ToyCorpusSpec {
            n_images,
            vocab_size,
            caption_len_range: (3, 6),
            captions_per_image: 5,
            sample_rate: WAV_SAMPLE_RATE,
            seed,
            word_ms: 250,
            tone_amplitude: 0.5,
            noise_amplitude: 0.01,
            image_dim: 128,
            dev_images: n_images / 10,
            test_images: n_images / 2,
        }
    }

    pub fn train_images(&self) -> usize {
        self.n_images
            .saturating_sub(self.dev_images + self.test_images)
    }

    pub fn word_frequency(w: usize) -> f64 {
        BASE_HZ + STEP_HZ * w as f64
    }

    pub fn word_name(w: usize) -> String {
        format!("{TOY_WORD_PREFIX}{w:02}")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.caption_len_range;
        if self.n_images == 0 || self.vocab_size == 0 || self.captions_per_image == 0 {
            return bad("n_images, vocab_size and captions_per_image must be positive".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!(
                "caption_len_range ({lo}, {hi}) must satisfy 0 < min <= max"
            ));
        }
        if hi > self.vocab_size {
            return bad(format!(
                "captions of up to {hi} distinct words need vocab_size >= {hi}"
            ));
        }
        if self.sample_rate != WAV_SAMPLE_RATE {
            return bad(format!("toy audio is written at {WAV_SAMPLE_RATE} Hz only"));
        }
        let top = Self::word_frequency(self.vocab_size - 1);
        let nyquist = self.sample_rate as f64 / 2.0;
        if top >= nyquist {
            return bad(format!(
                "vocab_size {} puts the top tone at {top} Hz, at or above Nyquist ({nyquist} Hz)",
                self.vocab_size
            ));
        }
        if self.word_ms == 0 || self.image_dim == 0 {
            return bad("word_ms and image_dim must be positive".into());
        }
        if self.train_images() < 2 || self.dev_images == 0 || self.test_images == 0 {
            return bad(format!(
                "split {}/{}/{} needs at least 2 train images and nonempty dev and test",
                self.train_images(),
                self.dev_images,
                self.test_images
            ));
        }
        if !(self.tone_amplitude > 0.0 && self.noise_amplitude >= 0.0)
            || self.tone_amplitude + 4.0 * self.noise_amplitude > 1.0
        {
            return bad("tone and noise amplitudes must fit in [-1, 1]".into());
        }
        Ok(())
    }
}

/// Where `gen_toy_corpus` put things.
#[derive(Debug, Clone)]
pub struct ToyOutput {
    pub manifest: PathBuf,
    pub image_features: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const TOY_MANIFEST: &str = "manifest.jsonl";
pub const TOY_IMAGE_FEATURES: &str = "image_features.f32m";

fn word_unit(
    spec: &ToyCorpusSpec,
    w: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<f32> {
    let n = (spec.sample_rate as usize * spec.word_ms as usize) / 1000;
    let f = ToyCorpusSpec::word_frequency(w);
    let sr = spec.sample_rate as f64;
    (0..n)
        .map(|i| {
            let tone =
                spec.tone_amplitude as f64 * (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin();
            (tone + spec.noise_amplitude as f64 * noise.sample(rng)) as f32
        })
        .collect()
}

/// Write a toy corpus to `out_dir`: `manifest.jsonl`, `audio/*.wav` and
/// `image_features.f32m`. The output depends only on `spec`.
pub fn gen_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<ToyOutput> {
    spec.validate()?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit_noise = Normal::new(0.0, 1.0).expect("unit normal");

    let projection = Array2::from_shape_fn((spec.image_dim, spec.vocab_size), |_| {
        unit_noise.sample(&mut rng) / (spec.vocab_size as f64).sqrt()
    });

    let (lo, hi) = spec.caption_len_range;
    let vocab: Vec<usize> = (0..spec.vocab_size).collect();
    let mut images = Array2::<f32>::zeros((spec.n_images, spec.image_dim));
    let mut entries = Vec::with_capacity(spec.n_images * spec.captions_per_image);
    let n_train = spec.train_images();

    for img in 0..spec.n_images {
        let len = rng.gen_range(lo..=hi);
        let words: Vec<usize> = vocab.choose_multiple(&mut rng, len).copied().collect();
        let mut bow = vec![0.0f64; spec.vocab_size];
        for &w in &words {
            bow[w] = 1.0;
        }
        for (d, v) in images.row_mut(img).iter_mut().enumerate() {
            *v = (0..spec.vocab_size)
                .map(|w| projection[[d, w]] * bow[w])
                .sum::<f64>() as f32;
        }

        let split = if img < n_train {
            Split::Train
        } else if img < n_train + spec.dev_images {
            Split::Dev
        } else {
            Split::Test
        };
        let image_id = format!("img{img:05}");
        for c in 0..spec.captions_per_image {
            let mut order = words.clone();
            order.shuffle(&mut rng);
            let mut samples = Vec::new();
            for &w in &order {
                samples.extend(word_unit(spec, w, &mut rng, &unit_noise));
            }
            let rel = format!("audio/{image_id}_{c}.wav");
            write_wav(
                &out_dir.join(&rel),
                &Waveform::new(samples, spec.sample_rate)?,
            )?;
            let caption_text = order
                .iter()
                .map(|&w| ToyCorpusSpec::word_name(w))
                .collect::<Vec<_>>()
                .join(" ");
            entries.push(ManifestEntry {
                utterance_id: format!("{image_id}_{c}"),
                image_id: image_id.clone(),
                audio_path: Some(rel),
                feature_path: None,
                image_feature_ref: img,
                caption_text,
                split,
            });
        }
    }

    let manifest = out_dir.join(TOY_MANIFEST);
    write_manifest(&manifest, &entries)?;
    let image_features = out_dir.join(TOY_IMAGE_FEATURES);
    ImageFeatureTable::new(images)?.save(&image_features)?;
    Ok(ToyOutput {
        manifest,
        image_features,
        entries,
    })
}
