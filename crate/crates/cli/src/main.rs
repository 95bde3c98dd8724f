use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use s2i_core::config::RunConfig;
use s2i_core::corpus::{
    gen_toy_corpus, load_entry_features, load_manifest, write_feature_matrix, write_manifest,
    ManifestEntry, Split, ToyCorpusSpec, TOY_IMAGE_FEATURES, TOY_MANIFEST,
};
use s2i_core::encoders::Preset;
use s2i_core::frontend::{FrontendConfig, MfccAnalyzer};
use s2i_core::pipeline::{
    default_image_features, evaluate_snapshot_files, probe_snapshot_file, train_from_config,
};
use s2i_core::probe::{F1Averaging, ProbeConfig, ProbeLayer, VocabFilter};
use s2i_core::{Error, Result, TOOL_VERSION};

#[derive(Parser)]
#[command(
    name = "s2i",
    version,
    about = "Spoken-caption to image embeddings: data, training, evaluation, probing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone-burst corpus plus a starter training config.
    GenToy(GenToyArgs),
    /// Compute acoustic features for every utterance of a manifest.
    Extract(ExtractArgs),
    /// Train from a run config, writing snapshots and logs.
    Train(TrainArgs),
    /// Retrieval metrics for one snapshot or a summed ensemble.
    Evaluate(EvaluateArgs),
    /// Word-presence probe on one encoder layer.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 3)]
    min_words: usize,
    #[arg(long, default_value_t = 6)]
    max_words: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON file with front-end settings; defaults apply when omitted.
    #[arg(long)]
    frontend: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Comma-separated snapshot files; more than one sums their embeddings.
    #[arg(long, value_delimiter = ',', required = true)]
    snapshots: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to image_features.f32m beside the manifest.
    #[arg(long)]
    image_features: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// input, gru1, gru2, gru3 or attention.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    image_features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Average F1 per word instead of pooling all decisions.
    #[arg(long)]
    macro_f1: bool,
    /// Least number of occurrences for a word to be probed.
    #[arg(long, default_value_t = 50)]
    min_word_count: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy(a) => gen_toy(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => {
            let summary = train_from_config(&a.config, &a.out, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:>9.4}  lr {:.2e}  dev R@10 c2i {:>5.1}  i2c {:>5.1}",
                    e.epoch,
                    e.mean_loss,
                    e.lr_last,
                    e.dev.caption_to_image.recall(10),
                    e.dev.image_to_caption.recall(10)
                )
            })?;
            eprintln!("ensemble: {}", summary.ensemble.join(", "));
            Ok(())
        }
        Command::Evaluate(a) => {
            let split: Split = a.split.parse()?;
            let images = a
                .image_features
                .unwrap_or_else(|| default_image_features(&a.manifest));
            refuse_overwrite(&a.out, &[&a.manifest, &images])?;
            let report = evaluate_snapshot_files(&a.snapshots, &a.manifest, &images, split)?;
            report.write(&a.out)?;
            eprintln!(
                "{split}: caption->image R@1/5/10 {:.1}/{:.1}/{:.1}, image->caption {:.1}/{:.1}/{:.1}",
                report.result.caption_to_image.recall(1),
                report.result.caption_to_image.recall(5),
                report.result.caption_to_image.recall(10),
                report.result.image_to_caption.recall(1),
                report.result.image_to_caption.recall(5),
                report.result.image_to_caption.recall(10)
            );
            Ok(())
        }
        Command::Probe(a) => {
            let layer: ProbeLayer = a.layer.parse()?;
            let images = a
                .image_features
                .unwrap_or_else(|| default_image_features(&a.manifest));
            refuse_overwrite(&a.out, &[&a.manifest, &images, &a.snapshot])?;
            let cfg = ProbeConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
                averaging: if a.macro_f1 {
                    F1Averaging::Macro
                } else {
                    F1Averaging::Micro
                },
                vocab: VocabFilter {
                    min_count: a.min_word_count,
                    ..VocabFilter::default()
                },
                ..ProbeConfig::default()
            };
            let out = probe_snapshot_file(&a.snapshot, layer, &a.manifest, &images, &cfg)?;
            out.write(&a.out)?;
            eprintln!(
                "{layer}: AUC {:.3}, best F1 {:.3}",
                out.report.auc,
                out.report.max_f1()
            );
            Ok(())
        }
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn refuse_overwrite(out: &Path, inputs: &[&Path]) -> Result<()> {
    if inputs.iter().any(|i| same_file(out, i)) {
        return Err(Error::Validation(format!(
            "output {} would overwrite an input",
            out.display()
        )));
    }
    Ok(())
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        captions_per_image: a.captions_per_image,
        caption_len_range: (a.min_words, a.max_words),
        ..ToyCorpusSpec::new(a.images, a.vocab, a.seed)
    };
    let out = gen_toy_corpus(&spec, &a.out)?;
    let cfg = RunConfig::new(TOY_MANIFEST, TOY_IMAGE_FEATURES, Preset::Toy);
    let cfg_path = a.out.join("train_config.json");
    std::fs::write(&cfg_path, cfg.to_json_pretty()).map_err(|e| Error::io(&cfg_path, e))?;
    let spec_path = a.out.join("toy_spec.json");
    let spec_json = serde_json::json!({ "tool_version": TOOL_VERSION, "spec": spec });
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(&spec_json).expect("spec serializes") + "\n",
    )
    .map_err(|e| Error::io(&spec_path, e))?;
    eprintln!(
        "wrote {} utterances to {} (config: {})",
        out.entries.len(),
        a.out.display(),
        cfg_path.display()
    );
    Ok(())
}

fn feature_file_name(index: usize, utterance_id: &str) -> String {
    let safe: String = utterance_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:06}_{safe}.f32m")
}

fn extract(a: ExtractArgs) -> Result<()> {
    let frontend = match &a.frontend {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<FrontendConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FrontendConfig::default(),
    };
    let entries = load_manifest(&a.manifest)?;
    let out_manifest = a.out.join(TOY_MANIFEST);
    refuse_overwrite(&out_manifest, &[&a.manifest])?;
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let feat_dir = a.out.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let analyzer = MfccAnalyzer::new(&frontend)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", a.workers)))?;
    let rewritten: Vec<ManifestEntry> = pool.install(|| {
        entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let feats = load_entry_features(e, &base, &analyzer)?;
                let rel = format!("features/{}", feature_file_name(i, &e.utterance_id));
                write_feature_matrix(&a.out.join(&rel), &feats)?;
                Ok(ManifestEntry {
                    audio_path: None,
                    feature_path: Some(rel),
                    ..e.clone()
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_manifest(&out_manifest, &rewritten)?;
    let images = default_image_features(&a.manifest);
    if images.exists() {
        let dst = a.out.join(TOY_IMAGE_FEATURES);
        if !same_file(&images, &dst) {
            std::fs::copy(&images, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    eprintln!(
        "extracted {} utterances into {}",
        rewritten.len(),
        a.out.display()
    );
    Ok(())
}
