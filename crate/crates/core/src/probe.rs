//! Word-presence probes: a linear sigmoid classifier trained on frozen,
//! mean-pooled layer activations, scored by F1 over a threshold grid and by
//! ROC AUC.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bi_gru_forward, l2_normalize, BiGruParams, Parameters};
use crate::corpus::{Corpus, Split};
use crate::encoders::{init_bi_gru, ModelParams};
use crate::frontend::FeatureMatrix;
use crate::trainer::{adam_step, AdamConfig, AdamState};
use crate::{Error, Result};

/// Lowercase, split on whitespace, strip non-alphanumerics from both ends.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabFilter {
    pub min_count: usize,
    pub max_count: usize,
    pub min_chars: usize,
}

impl Default for VocabFilter {
    fn default() -> Self {
        VocabFilter {
            min_count: 50,
            max_count: 1000,
            min_chars: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeVocabulary {
    /// Most frequent first, ties in lexicographic order.
    pub words: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

impl ProbeVocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn total_occurrences(&self) -> usize {
        self.counts.values().sum()
    }

    /// Build from a word-count table.
    pub fn from_counts(counts: &BTreeMap<String, usize>, filter: &VocabFilter) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(w, &c)| {
                (filter.min_count..=filter.max_count).contains(&c)
                    && w.chars().count() >= filter.min_chars
            })
            .map(|(w, &c)| (w, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(ProbeVocabulary {
            words: kept.iter().map(|(w, _)| (*w).clone()).collect(),
            counts: kept.iter().map(|(w, c)| ((*w).clone(), *c)).collect(),
        })
    }

    /// 0/1 indicator of each vocabulary word in `text`.
    pub fn presence(&self, text: &str) -> Array1<f32> {
        let tokens = tokenize(text);
        self.words
            .iter()
            .map(|w| {
                if tokens.iter().any(|t| t == w) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// One presence row per text.
    pub fn targets<S: AsRef<str>>(&self, texts: &[S]) -> Array2<f32> {
        let mut out = Array2::zeros((texts.len(), self.len()));
        for (mut row, t) in out.rows_mut().into_iter().zip(texts) {
            row.assign(&self.presence(t.as_ref()));
        }
        out
    }
}

pub fn build_vocabulary<S: AsRef<str>>(
    captions: &[S],
    filter: &VocabFilter,
) -> Result<ProbeVocabulary> {
    let mut counts = BTreeMap::new();
    for c in captions {
        for t in tokenize(c.as_ref()) {
            *counts.entry(t).or_insert(0usize) += 1;
        }
    }
    ProbeVocabulary::from_counts(&counts, filter)
}

// -------------------------------------------------------------------- taps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLayer {
    /// Trained conv followed by a frozen, randomly initialized bi-GRU.
    Input,
    /// Output of GRU layer `n` (1-based).
    Gru(usize),
    /// The caption embedding itself.
    Attention,
}

impl FromStr for ProbeLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(ProbeLayer::Input),
            "attention" => Ok(ProbeLayer::Attention),
            _ => s
                .strip_prefix("gru")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(ProbeLayer::Gru)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "unknown layer '{s}'; expected input, gru1..gruN or attention"
                    ))
                }),
        }
    }
}

impl fmt::Display for ProbeLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeLayer::Input => f.write_str("input"),
            ProbeLayer::Gru(n) => write!(f, "gru{n}"),
            ProbeLayer::Attention => f.write_str("attention"),
        }
    }
}

pub const UNTRAINED_GRU_SEED: u64 = 0;

/// The frozen bi-GRU used by the input tap.
pub fn untrained_gru(model: &ModelParams<f32>) -> BiGruParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(UNTRAINED_GRU_SEED);
    init_bi_gru(
        &mut rng,
        model.config.conv_channels,
        model.config.gru_hidden,
    )
}

/// Average the first `n_valid` rows and scale to unit length.
pub fn mean_pool_normalized(states: ArrayView2<f32>, n_valid: usize) -> Result<Array1<f32>> {
    if n_valid == 0 || n_valid > states.nrows() {
        return Err(Error::Shape(format!(
            "cannot pool {n_valid} of {} rows",
            states.nrows()
        )));
    }
    let mean = states
        .slice(ndarray::s![..n_valid, ..])
        .mean_axis(Axis(0))
        .expect("nonempty");
    Ok(l2_normalize(mean.view())?.0)
}

/// Extracts fixed-size representations of captions at one layer.
#[derive(Debug, Clone)]
pub struct Tapper<'a> {
    model: &'a ModelParams<f32>,
    layer: ProbeLayer,
    untrained: Option<BiGruParams<f32>>,
}

impl<'a> Tapper<'a> {
    pub fn new(model: &'a ModelParams<f32>, layer: ProbeLayer) -> Result<Self> {
        if let ProbeLayer::Gru(n) = layer {
            if n > model.config.gru_layers {
                return Err(Error::Validation(format!(
                    "layer gru{n} requested but the model has {} GRU layers",
                    model.config.gru_layers
                )));
            }
        }
        let untrained = (layer == ProbeLayer::Input).then(|| untrained_gru(model));
        Ok(Tapper {
            model,
            layer,
            untrained,
        })
    }

    pub fn tap(&self, feat: &FeatureMatrix) -> Result<Array1<f32>> {
        let x = feat.data.view();
        let n = feat.n_valid_frames;
        match self.layer {
            ProbeLayer::Input => {
                let (conv, steps, _) = self.model.caption.conv_forward(x, n)?;
                let gru = self.untrained.as_ref().expect("built for the input tap");
                let (h, _) = bi_gru_forward(conv.view(), steps, gru)?;
                mean_pool_normalized(h.view(), steps)
            }
            ProbeLayer::Gru(l) => {
                let pass = self.model.caption.forward(x, n)?;
                mean_pool_normalized(pass.taps.gru[l - 1].view(), pass.taps.n_steps)
            }
            ProbeLayer::Attention => Ok(self.model.caption.forward(x, n)?.taps.embedding),
        }
    }

    pub fn tap_all(&self, feats: &[&FeatureMatrix]) -> Result<Array2<f32>> {
        let rows = feats
            .iter()
            .map(|f| self.tap(f))
            .collect::<Result<Vec<_>>>()?;
        let dim = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), dim));
        for (mut dst, r) in out.rows_mut().into_iter().zip(&rows) {
            dst.assign(r);
        }
        Ok(out)
    }
}

// ------------------------------------------------------------------- probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub averaging: F1Averaging,
    pub vocab: VocabFilter,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            epochs: 32,
            batch_size: 32,
            seed: 0,
            averaging: F1Averaging::Micro,
            vocab: VocabFilter::default(),
        }
    }
}

/// `sigmoid(W x + b)`, one output per vocabulary word.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Parameters<f32> for LinearProbe {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f32>)> {
        vec![
            ("probe.w".into(), self.w.view().into_dyn()),
            ("probe.b".into(), self.b.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f32>)> {
        vec![
            ("probe.w".into(), self.w.view_mut().into_dyn()),
            ("probe.b".into(), self.b.view_mut().into_dyn()),
        ]
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]` without overflow.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl LinearProbe {
    pub fn zeros(rep_dim: usize, n_words: usize) -> Self {
        LinearProbe {
            w: Array2::zeros((n_words, rep_dim)),
            b: Array1::zeros(n_words),
        }
    }

    pub fn logits(&self, reps: ArrayView2<f32>) -> Result<Array2<f32>> {
        if reps.ncols() != self.w.ncols() {
            return Err(Error::Shape(format!(
                "probe expects {}-dim inputs, got {}",
                self.w.ncols(),
                reps.ncols()
            )));
        }
        Ok(reps.dot(&self.w.t()) + &self.b)
    }

    pub fn predict(&self, reps: ArrayView2<f32>) -> Result<Array2<f64>> {
        Ok(self.logits(reps)?.mapv(|z| sigmoid(z as f64)))
    }

    /// Mean BCE over every (item, word) decision.
    pub fn bce(&self, reps: ArrayView2<f32>, targets: ArrayView2<f32>) -> Result<f64> {
        let z = self.logits(reps)?;
        check_targets(&z, targets)?;
        let total: f64 = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| bce_from_logit(z as f64, y as f64))
            .sum();
        Ok(total / z.len().max(1) as f64)
    }
}

fn check_targets(z: &Array2<f32>, targets: ArrayView2<f32>) -> Result<()> {
    if z.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "predictions are {:?} but targets are {:?}",
            z.dim(),
            targets.dim()
        )));
    }
    Ok(())
}

/// Fit a zero-initialized probe with Adam at a constant rate. Returns the
/// probe and the mean training BCE of each epoch.
pub fn train_probe(
    reps: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, Vec<f64>)> {
    if reps.nrows() != targets.nrows() {
        return Err(Error::Shape(format!(
            "{} representations but {} target rows",
            reps.nrows(),
            targets.nrows()
        )));
    }
    if reps.nrows() == 0 || targets.ncols() == 0 {
        return Err(Error::Validation(
            "probe training needs items and words".into(),
        ));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(
            "probe batch_size must be positive and lr >= 0".into(),
        ));
    }
    let mut probe = LinearProbe::zeros(reps.ncols(), targets.ncols());
    let mut state = AdamState::new(&probe);
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..reps.nrows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = reps.select(Axis(0), idx);
            let y = targets.select(Axis(0), idx);
            let z = probe.logits(x.view())?;
            let scale = 1.0 / z.len() as f64;
            let mut dz = Array2::<f32>::zeros(z.dim());
            for ((d, &z), &y) in dz.iter_mut().zip(z.iter()).zip(y.iter()) {
                total += bce_from_logit(z as f64, y as f64) * idx.len() as f64 * scale;
                *d = ((sigmoid(z as f64) - y as f64) * scale) as f32;
            }
            let grads = LinearProbe {
                w: dz.t().dot(&x),
                b: dz.sum_axis(Axis(0)),
            };
            adam_step(&mut probe, &grads, &mut state, cfg.lr, &adam)?;
        }
        history.push(total / reps.nrows() as f64);
    }
    Ok((probe, history))
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Averaging {
    /// Pool every (item, word) decision.
    Micro,
    /// Average per-word F1 over words with at least one positive.
    Macro,
}

pub const N_THRESHOLDS: usize = 20;

/// 0.05, 0.10, ..., 1.00.
pub fn thresholds() -> Vec<f64> {
    (1..=N_THRESHOLDS)
        .map(|k| k as f64 / N_THRESHOLDS as f64)
        .collect()
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 with "present" meaning `score > threshold`.
pub fn f1_at(
    scores: ArrayView2<f64>,
    targets: ArrayView2<f32>,
    thr: f64,
    averaging: F1Averaging,
) -> f64 {
    let counts = |col: Option<usize>| {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for ((idx, &s), &y) in scores.indexed_iter().zip(targets.iter()) {
            if col.is_some_and(|c| c != idx.1) {
                continue;
            }
            match (s > thr, y > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        (tp, fp, fn_)
    };
    match averaging {
        F1Averaging::Micro => {
            let (tp, fp, fn_) = counts(None);
            f1(tp, fp, fn_)
        }
        F1Averaging::Macro => {
            let per_word: Vec<f64> = (0..scores.ncols())
                .filter(|&c| targets.column(c).iter().any(|&y| y > 0.5))
                .map(|c| {
                    let (tp, fp, fn_) = counts(Some(c));
                    f1(tp, fp, fn_)
                })
                .collect();
            if per_word.is_empty() {
                0.0
            } else {
                per_word.iter().sum::<f64>() / per_word.len() as f64
            }
        }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(format!(
            "AUC is undefined with {n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: String,
    pub averaging: F1Averaging,
    /// `(threshold, F1)` pairs.
    pub f1_curve: Vec<(f64, f64)>,
    pub auc: f64,
    pub n_items: usize,
    pub n_words: usize,
    pub n_positive: usize,
}

impl ProbeReport {
    pub fn max_f1(&self) -> f64 {
        self.f1_curve.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn f1_csv(&self) -> String {
        let mut out = String::from("threshold,f1\n");
        for (t, f) in &self.f1_curve {
            let _ = writeln!(out, "{t},{f}");
        }
        out
    }
}

pub fn evaluate_scores(
    scores: ArrayView2<f64>,
    targets: ArrayView2<f32>,
    layer: &str,
    averaging: F1Averaging,
) -> Result<ProbeReport> {
    if scores.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "scores are {:?} but targets are {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    let flat: Vec<f64> = scores.iter().copied().collect();
    let labels: Vec<bool> = targets.iter().map(|&y| y > 0.5).collect();
    let auc = roc_auc(&flat, &labels)?;
    Ok(ProbeReport {
        layer: layer.to_string(),
        averaging,
        f1_curve: thresholds()
            .into_iter()
            .map(|t| (t, f1_at(scores, targets, t, averaging)))
            .collect(),
        auc,
        n_items: scores.nrows(),
        n_words: scores.ncols(),
        n_positive: labels.iter().filter(|&&l| l).count(),
    })
}

pub fn evaluate_probe(
    probe: &LinearProbe,
    reps: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    layer: ProbeLayer,
    averaging: F1Averaging,
) -> Result<ProbeReport> {
    let scores = probe.predict(reps)?;
    evaluate_scores(scores.view(), targets, &layer.to_string(), averaging)
}

/// Everything a layer probe produced.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub vocabulary: ProbeVocabulary,
    pub probe: LinearProbe,
    pub train_loss: Vec<f64>,
    pub report: ProbeReport,
}

/// Build the vocabulary from every caption in the corpus, fit the probe on
/// train-split taps and score it on test-split taps.
pub fn probe_layer(
    model: &ModelParams<f32>,
    corpus: &Corpus,
    layer: ProbeLayer,
    cfg: &ProbeConfig,
) -> Result<ProbeRun> {
    let texts: Vec<&str> = corpus
        .entries
        .iter()
        .map(|e| e.caption_text.as_str())
        .collect();
    let vocabulary = build_vocabulary(&texts, &cfg.vocab)?;
    if vocabulary.is_empty() {
        return Err(Error::Validation(
            "no word passes the vocabulary filter".into(),
        ));
    }
    let tapper = Tapper::new(model, layer)?;
    let split_data = |s: Split| -> Result<(Array2<f32>, Array2<f32>)> {
        let idx = corpus.split(s).captions;
        if idx.is_empty() {
            return Err(Error::Validation(format!("split {s} is empty")));
        }
        let feats: Vec<&FeatureMatrix> = idx.iter().map(|&i| &corpus.features[i]).collect();
        let texts: Vec<&str> = idx
            .iter()
            .map(|&i| corpus.entries[i].caption_text.as_str())
            .collect();
        Ok((tapper.tap_all(&feats)?, vocabulary.targets(&texts)))
    };
    let (train_x, train_y) = split_data(Split::Train)?;
    let (test_x, test_y) = split_data(Split::Test)?;
    let (probe, train_loss) = train_probe(train_x.view(), train_y.view(), cfg)?;
    let report = evaluate_probe(&probe, test_x.view(), test_y.view(), layer, cfg.averaging)?;
    Ok(ProbeRun {
        vocabulary,
        probe,
        train_loss,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vocabulary_filter_example() {
        let counts: BTreeMap<String, usize> = [
            ("dogs", 600),
            ("the", 900),
            ("man", 500),
            ("running", 999),
            ("skateboard", 1001),
            ("blue", 49),
            ("bird", 50),
        ]
        .into_iter()
        .map(|(w, c)| (w.to_string(), c))
        .collect();
        let v = ProbeVocabulary::from_counts(&counts, &VocabFilter::default()).unwrap();
        assert_eq!(v.words, ["running", "dogs", "bird"]);
        assert!(ProbeVocabulary::from_counts(&BTreeMap::new(), &VocabFilter::default()).is_err());
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize("A dog's  \"ball\", RUNNING!"),
            ["a", "dog's", "ball", "running"]
        );
    }

    #[test]
    fn layer_names() {
        for s in ["input", "gru1", "gru3", "attention"] {
            assert_eq!(s.parse::<ProbeLayer>().unwrap().to_string(), s);
        }
        assert!("gru0".parse::<ProbeLayer>().is_err());
        assert!("conv".parse::<ProbeLayer>().is_err());
    }

    #[test]
    fn auc_pairwise_example() {
        let auc = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        assert!(roc_auc(&[0.1, 0.2], &[false, false]).is_err());
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn zero_probe_outputs_one_half() {
        let p = LinearProbe::zeros(3, 2);
        let x = array![[0.3f32, -1.0, 2.0]];
        let y = array![[1.0f32, 0.0]];
        assert!(p.predict(x.view()).unwrap().iter().all(|&v| v == 0.5));
        assert!((p.bce(x.view(), y.view()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn threshold_grid() {
        let t = thresholds();
        assert_eq!(t.len(), 20);
        assert_eq!(t[0], 0.05);
        assert_eq!(t[19], 1.0);
    }
}
