//! End-to-end steps shared by the command-line tool and the test suites:
//! train from a config file, evaluate snapshot files, probe a snapshot.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Corpus, Split, TOY_IMAGE_FEATURES};
use crate::encoders::EncoderConfig;
use crate::probe::{probe_layer, ProbeConfig, ProbeLayer, ProbeReport};
use crate::retrieval::RetrievalResult;
use crate::trainer::{
    select_snapshots, train, Ensemble, EpochLog, SaveContext, Snapshot, SnapshotMeta,
};
use crate::{Error, Result, TOOL_VERSION};

/// `image_features.f32m` next to the manifest.
pub fn default_image_features(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join(TOY_IMAGE_FEATURES)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `report.json` -> `report.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub file: String,
    pub epoch: usize,
    pub dev_selector: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub tool_version: String,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub snapshots: Vec<SnapshotSummary>,
    /// Files of the snapshots picked for the ensemble, best first.
    pub ensemble: Vec<String>,
    pub ensemble_dev: RetrievalResult,
}

/// Train with the config at `config_path`, writing snapshots, sidecars,
/// `train_log.jsonl` and `train_summary.json` into `out_dir`.
pub fn train_from_config(
    config_path: &Path,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    let (manifest, images) = cfg.resolve(config_path);
    let corpus = Corpus::load(&manifest, &images, &cfg.frontend)?;
    let feat_dim = corpus
        .feat_dim()
        .ok_or_else(|| Error::Validation("manifest has no entries".into()))?;
    let encoder = EncoderConfig::from_preset(cfg.preset, feat_dim, corpus.images.dim());
    let run = train(&corpus, &encoder, &cfg.train, &cfg.loss, on_epoch)?;

    let hash = cfg.config_hash();
    let ctx = SaveContext {
        config_hash: hash.clone(),
        frontend: cfg.frontend.clone(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = run.save(out_dir, &ctx)?;
    let run_cfg = out_dir.join("run_config.json");
    std::fs::write(&run_cfg, cfg.to_json_pretty()).map_err(|e| Error::io(&run_cfg, e))?;

    let chosen = select_snapshots(&run.snapshots, cfg.ensemble_size)?;
    let ensemble_dev = Ensemble::new(chosen.iter().map(|s| s.params.clone()).collect())?
        .evaluate(&corpus, Split::Dev)?;
    let name_of = |epoch: usize| {
        run.snapshots
            .iter()
            .zip(&paths)
            .find(|(s, _)| s.epoch == epoch)
            .map(|(_, p)| file_name(p))
            .expect("every snapshot was saved")
    };
    let summary = TrainSummary {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: hash,
        encoder,
        snapshots: run
            .snapshots
            .iter()
            .zip(&paths)
            .map(|(s, p)| SnapshotSummary {
                file: file_name(p),
                epoch: s.epoch,
                dev_selector: s.dev.selector(),
            })
            .collect(),
        ensemble: chosen.iter().map(|s| name_of(s.epoch)).collect(),
        ensemble_dev,
    };
    write_json(&out_dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn load_snapshots(paths: &[PathBuf]) -> Result<(Vec<Snapshot>, Vec<SnapshotMeta>)> {
    if paths.is_empty() {
        return Err(Error::Validation("no snapshots given".into()));
    }
    let (snaps, metas): (Vec<_>, Vec<_>) = paths
        .iter()
        .map(|p| Snapshot::load(p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    if metas.iter().any(|m| m.frontend != metas[0].frontend) {
        return Err(Error::Validation(
            "snapshots were trained with different front ends".into(),
        ));
    }
    Ok((snaps, metas))
}

fn joined_hash(metas: &[SnapshotMeta]) -> String {
    let mut hashes: Vec<&str> = metas.iter().map(|m| m.config_hash.as_str()).collect();
    hashes.dedup();
    hashes.join("+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config_hash: String,
    pub split: Split,
    pub snapshots: Vec<String>,
    pub snapshot_epochs: Vec<usize>,
    pub n_images: usize,
    pub n_captions: usize,
    #[serde(flatten)]
    pub result: RetrievalResult,
}

impl EvalReport {
    /// Write `out` as JSON and the same metrics as CSV beside it.
    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(out, self)?;
        let csv = sibling(out, "csv");
        std::fs::write(&csv, self.result.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Retrieval on `split` with the summed embeddings of every snapshot given.
pub fn evaluate_snapshot_files(
    paths: &[PathBuf],
    manifest: &Path,
    image_features: &Path,
    split: Split,
) -> Result<EvalReport> {
    let (snaps, metas) = load_snapshots(paths)?;
    let corpus = Corpus::load(manifest, image_features, &metas[0].frontend)?;
    let data = corpus.split(split);
    let ensemble = Ensemble::new(snaps.iter().map(|s| s.params.clone()).collect())?;
    Ok(EvalReport {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: joined_hash(&metas),
        split,
        snapshots: paths.iter().map(|p| file_name(p)).collect(),
        snapshot_epochs: snaps.iter().map(|s| s.epoch).collect(),
        n_images: data.n_images(),
        n_captions: data.n_captions(),
        result: ensemble.evaluate(&corpus, split)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub tool_version: String,
    pub config_hash: String,
    pub snapshot: String,
    pub probe_config: ProbeConfig,
    pub vocabulary: Vec<String>,
    pub final_train_bce: f64,
    #[serde(flatten)]
    pub report: ProbeReport,
}

impl ProbeOutput {
    /// Write `out` as JSON and the F1 curve as CSV beside it.
    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(out, self)?;
        let csv = sibling(out, "f1.csv");
        std::fs::write(&csv, self.report.f1_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub fn probe_snapshot_file(
    path: &Path,
    layer: ProbeLayer,
    manifest: &Path,
    image_features: &Path,
    cfg: &ProbeConfig,
) -> Result<ProbeOutput> {
    let (snaps, metas) = load_snapshots(&[path.to_path_buf()])?;
    let corpus = Corpus::load(manifest, image_features, &metas[0].frontend)?;
    let run = probe_layer(&snaps[0].params, &corpus, layer, cfg)?;
    Ok(ProbeOutput {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: joined_hash(&metas),
        snapshot: file_name(path),
        probe_config: cfg.clone(),
        vocabulary: run.vocabulary.words.clone(),
        final_train_bce: run.train_loss.last().copied().unwrap_or(f64::NAN),
        report: run.report,
    })
}
