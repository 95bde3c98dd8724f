//! Adam with a cosine-cycled learning rate, snapshotting at every cycle
//! minimum, and summed-embedding ensembles of the best snapshots.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Parameters, Real};
use crate::corpus::{Corpus, Split};
use crate::encoders::{
    caption_backward, image_backward, image_forward, EncoderConfig, ModelParams,
};
use crate::frontend::{FeatureMatrix, FrontendConfig};
use crate::objective::{hinge_loss, LossConfig, PairBatch};
use crate::retrieval::{evaluate_retrieval, RetrievalResult};
use crate::{Error, Result, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub snapshot_every: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 32,
            snapshot_every: 4,
            lr_min: 1e-6,
            lr_max: 2e-4,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.snapshot_every == 0 {
            return bad("epochs and snapshot_every must be positive".into());
        }
        if self.epochs % self.snapshot_every != 0 {
            return bad(format!(
                "snapshot_every ({}) must divide epochs ({})",
                self.snapshot_every, self.epochs
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn n_snapshots(&self) -> usize {
        self.epochs / self.snapshot_every
    }
}

/// Learning rate at position `frac` in [0, 1] of a cycle: `lr_max` at 0,
/// `lr_min` at 1, cosine in between.
pub fn lr_at_fraction(frac: f64, lr_min: f64, lr_max: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Learning rate for the update with 0-based index `step`. The cycle
/// position counts the update itself, so the last update of every cycle runs
/// at exactly `lr_min` and the next cycle restarts near `lr_max`.
pub fn cyclic_lr(step: usize, steps_per_cycle: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if steps_per_cycle == 0 {
        return Err(Error::Config("steps_per_cycle must be positive".into()));
    }
    let frac = ((step % steps_per_cycle) + 1) as f64 / steps_per_cycle as f64;
    Ok(lr_at_fraction(frac, lr_min, lr_max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
}

impl<P> AdamState<P> {
    pub fn new<F: Real>(params: &P) -> Self
    where
        P: Parameters<F>,
    {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Fail on the first tensor holding a NaN or infinite value.
pub fn check_finite<F: Real, P: Parameters<F>>(p: &P, what: &str) -> Result<()> {
    for (name, t) in p.tensors() {
        if let Some(pos) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite {what} in tensor '{name}' at flat index {pos}"
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update, computed in f64 per scalar.
pub fn adam_step<F: Real, P: Parameters<F>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_finite(grads, "gradient")?;
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    let gs = grads.tensors();
    for (i, (_, mut p)) in params.tensors_mut().into_iter().enumerate() {
        let g = &gs[i].1;
        let m = &mut ms[i].1;
        let v = &mut vs[i].1;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "tensor '{}': parameter {:?} vs gradient {:?}",
                gs[i].0,
                p.shape(),
                g.shape()
            )));
        }
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.as_f64();
            let m1 = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = F::lit(m1);
            *v = F::lit(v1);
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + cfg.eps);
            *p = F::lit(p.as_f64() - update);
        }
    }
    Ok(())
}

fn global_norm<F: Real, P: Parameters<F>>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| {
            t.iter()
                .map(|v| v.as_f64() * v.as_f64())
                .collect::<Vec<_>>()
        })
        .sum::<f64>()
        .sqrt()
}

// ------------------------------------------------------------------ batching

/// One epoch's batches as `(caption entry, image row)` pairs. Captions are
/// dealt in rounds: each round takes one unused caption from every image, so
/// no batch holds two captions of the same image. A trailing batch of one is
/// folded into its predecessor from the same round.
pub fn epoch_batches(
    image_captions: &[Vec<usize>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut per_image: Vec<Vec<usize>> = image_captions.to_vec();
    for caps in per_image.iter_mut() {
        caps.shuffle(rng);
    }
    let rounds = per_image.iter().map(Vec::len).max().unwrap_or(0);
    let mut batches: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..rounds {
        let mut order: Vec<usize> = (0..per_image.len())
            .filter(|&i| per_image[i].len() > r)
            .collect();
        order.shuffle(rng);
        let pairs: Vec<(usize, usize)> = order.iter().map(|&i| (per_image[i][r], i)).collect();
        let start = batches.len();
        for chunk in pairs.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
        if batches.last().map(Vec::len) == Some(1) {
            let tail = batches.pop().expect("nonempty");
            // a round with a single image has no negatives and is skipped
            if batches.len() > start {
                batches.last_mut().expect("nonempty").extend(tail);
            }
        }
    }
    batches
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss and parameter gradient for one batch of matched pairs.
pub fn batch_gradient(
    params: &ModelParams<f32>,
    captions: &[&FeatureMatrix],
    images: ArrayView2<f32>,
    loss_cfg: &LossConfig,
) -> Result<(f64, ModelParams<f32>)> {
    let passes = captions
        .iter()
        .map(|f| params.caption.forward(f.data.view(), f.n_valid_frames))
        .collect::<Result<Vec<_>>>()?;
    let image_passes = images
        .rows()
        .into_iter()
        .map(|row| image_forward(row, &params.image))
        .collect::<Result<Vec<_>>>()?;
    let batch = PairBatch::new(
        passes.iter().map(|p| p.embedding().clone()).collect(),
        image_passes.iter().map(|p| p.embedding.clone()).collect(),
    )?;
    let out = hinge_loss(&batch, loss_cfg)?;
    let mut grads = params.zeros_like();
    for (pass, d) in passes.iter().zip(&out.d_captions) {
        grads
            .caption
            .accumulate(&caption_backward(pass, &params.caption, d.view()));
    }
    for (pass, d) in image_passes.iter().zip(&out.d_images) {
        grads
            .image
            .accumulate(&image_backward(pass, &params.image, d.view()));
    }
    Ok((out.loss as f64, grads))
}

// ----------------------------------------------------------- snapshots

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ModelParams<f32>,
    pub epoch: usize,
    pub dev: RetrievalResult,
}

/// JSON written next to every snapshot's parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub epoch: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub frontend: FrontendConfig,
    pub dev_metrics: RetrievalResult,
}

/// Provenance written into every sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct SaveContext {
    pub config_hash: String,
    pub frontend: FrontendConfig,
}

pub fn snapshot_file_name(epoch: usize) -> String {
    format!("snapshot_e{epoch:03}.s2i")
}

pub fn sidecar_path(params_path: &Path) -> PathBuf {
    params_path.with_extension("json")
}

impl Snapshot {
    pub fn save(&self, dir: &Path, ctx: &SaveContext) -> Result<PathBuf> {
        let path = dir.join(snapshot_file_name(self.epoch));
        self.params.to_param_set().save(&path)?;
        let meta = SnapshotMeta {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: ctx.config_hash.clone(),
            epoch: self.epoch,
            conv_stride: self.params.config.conv_stride,
            conv_padding: self.params.config.conv_padding,
            frontend: ctx.frontend.clone(),
            dev_metrics: self.dev.clone(),
        };
        let side = sidecar_path(&path);
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        Ok(path)
    }

    /// Load a parameter file and its sidecar.
    pub fn load(path: &Path) -> Result<(Self, SnapshotMeta)> {
        let set = ParamSet::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: SnapshotMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let cfg = EncoderConfig::infer_from(&set, meta.conv_stride, meta.conv_padding)?;
        let mut params = ModelParams::zeros(&cfg)?;
        params.load_param_set(&set)?;
        Ok((
            Snapshot {
                params,
                epoch: meta.epoch,
                dev: meta.dev_metrics.clone(),
            },
            meta,
        ))
    }
}

// ------------------------------------------------------------ ensembles

/// Models whose embeddings are summed. A single model is an ensemble of one.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<ModelParams<f32>>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelParams<f32>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Validation("an ensemble needs at least one snapshot".into()))?;
        if members
            .iter()
            .any(|m| m.config.embed_dim() != first.config.embed_dim())
        {
            return Err(Error::Shape(
                "ensemble members have different embedding sizes".into(),
            ));
        }
        Ok(Ensemble { members })
    }

    pub fn embed_dim(&self) -> usize {
        self.members[0].config.embed_dim()
    }

    /// One row per caption.
    pub fn embed_captions(&self, captions: &[&FeatureMatrix]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((captions.len(), self.embed_dim()));
        for m in &self.members {
            for (mut row, f) in out.rows_mut().into_iter().zip(captions) {
                let pass = m.caption.forward(f.data.view(), f.n_valid_frames)?;
                row += pass.embedding();
            }
        }
        Ok(out)
    }

    /// One row per image feature row.
    pub fn embed_images(&self, images: ArrayView2<f32>) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((images.nrows(), self.embed_dim()));
        for m in &self.members {
            for (mut row, feat) in out.rows_mut().into_iter().zip(images.rows()) {
                row += &image_forward(feat, &m.image)?.embedding;
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, corpus: &Corpus, split: Split) -> Result<RetrievalResult> {
        let data = corpus.split(split);
        if data.n_captions() == 0 {
            return Err(Error::Validation(format!("split {split} is empty")));
        }
        let feats: Vec<&FeatureMatrix> =
            data.captions.iter().map(|&i| &corpus.features[i]).collect();
        let caps = self.embed_captions(&feats)?;
        let rows = corpus
            .images
            .matrix
            .select(ndarray::Axis(0), &data.image_rows);
        let imgs = self.embed_images(rows.view())?;
        evaluate_retrieval(caps.view(), imgs.view(), &data.caption_image)
    }
}

/// The `k` snapshots with the highest dev selector, best first. Equal
/// scores keep epoch order.
pub fn select_snapshots(snapshots: &[Snapshot], k: usize) -> Result<Vec<&Snapshot>> {
    if snapshots.is_empty() || k == 0 {
        return Err(Error::Validation(
            "need at least one snapshot to ensemble".into(),
        ));
    }
    let mut order: Vec<&Snapshot> = snapshots.iter().collect();
    order.sort_by(|a, b| b.dev.selector().total_cmp(&a.dev.selector()));
    order.truncate(k);
    Ok(order)
}

pub fn ensemble(snapshots: &[Snapshot], k: usize) -> Result<Ensemble> {
    Ensemble::new(
        select_snapshots(snapshots, k)?
            .into_iter()
            .map(|s| s.params.clone())
            .collect(),
    )
}

// ------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub dev: RetrievalResult,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<EpochLog>,
}

impl TrainRun {
    /// Write every snapshot with its sidecar plus `train_log.jsonl`.
    pub fn save(&self, dir: &Path, ctx: &SaveContext) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = self
            .snapshots
            .iter()
            .map(|s| s.save(dir, ctx))
            .collect::<Result<Vec<_>>>()?;
        let mut log = String::new();
        for entry in &self.log {
            let mut v = serde_json::to_value(entry).expect("log serializes");
            v["config_hash"] = ctx.config_hash.as_str().into();
            v["tool_version"] = TOOL_VERSION.into();
            log.push_str(&v.to_string());
            log.push('\n');
        }
        let log_path = dir.join("train_log.jsonl");
        std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        Ok(paths)
    }
}

/// Train from a fresh initialization seeded by `cfg.seed`.
pub fn train(
    corpus: &Corpus,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainRun> {
    cfg.validate()?;
    loss.validate()?;
    encoder.validate()?;
    let train_split = corpus.split(Split::Train);
    if train_split.n_images() < 2 {
        return Err(Error::Validation(
            "the train split needs at least two images".into(),
        ));
    }
    if corpus.split(Split::Dev).n_captions() == 0 {
        return Err(Error::Validation("the dev split is empty".into()));
    }
    if corpus.feat_dim() != Some(encoder.feat_dim) || corpus.images.dim() != encoder.image_dim {
        return Err(Error::Shape(format!(
            "encoder expects {}-dim frames and {}-dim images; corpus has {:?} and {}",
            encoder.feat_dim,
            encoder.image_dim,
            corpus.feat_dim(),
            corpus.images.dim()
        )));
    }

    let image_captions: Vec<Vec<usize>> = train_split
        .image_captions
        .iter()
        .map(|caps| caps.iter().map(|&c| train_split.captions[c]).collect())
        .collect();
    let image_rows = &train_split.image_rows;

    let mut params = ModelParams::<f32>::init(encoder, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig::from(cfg);

    let steps_per_epoch =
        epoch_batches(&image_captions, cfg.batch_size, &mut epoch_rng(cfg.seed, 0)).len();
    let steps_per_cycle = steps_per_epoch * cfg.snapshot_every;
    let mut step = 0usize;
    let mut run = TrainRun {
        snapshots: Vec::with_capacity(cfg.n_snapshots()),
        log: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(
            &image_captions,
            cfg.batch_size,
            &mut epoch_rng(cfg.seed, epoch),
        );
        debug_assert_eq!(batches.len(), steps_per_epoch);
        let mut total = 0.0;
        let lr_first = cyclic_lr(step, steps_per_cycle, cfg.lr_min, cfg.lr_max)?;
        let mut lr = lr_first;
        for batch in &batches {
            let feats: Vec<&FeatureMatrix> =
                batch.iter().map(|&(c, _)| &corpus.features[c]).collect();
            let rows: Vec<usize> = batch.iter().map(|&(_, i)| image_rows[i]).collect();
            let imgs = corpus.images.matrix.select(ndarray::Axis(0), &rows);
            let (l, mut grads) = batch_gradient(&params, &feats, imgs.view(), loss)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {l} at epoch {epoch}, step {step}"
                )));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = global_norm(&grads);
                if norm > clip {
                    grads.scale((clip / norm) as f32);
                }
            }
            lr = cyclic_lr(step, steps_per_cycle, cfg.lr_min, cfg.lr_max)?;
            adam_step(&mut params, &grads, &mut state, lr, &adam)?;
            total += l;
            step += 1;
        }
        check_finite(&params, "parameter")?;
        let dev = Ensemble::new(vec![params.clone()])?.evaluate(corpus, Split::Dev)?;
        let entry = EpochLog {
            epoch,
            steps: batches.len(),
            mean_loss: total / batches.len() as f64,
            lr_first,
            lr_last: lr,
            dev: dev.clone(),
        };
        on_epoch(&entry);
        run.log.push(entry);
        if epoch % cfg.snapshot_every == 0 {
            run.snapshots.push(Snapshot {
                params: params.clone(),
                epoch,
                dev,
            });
        }
    }
    Ok(run)
}
