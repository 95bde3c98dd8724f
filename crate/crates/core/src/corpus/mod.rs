//! Dataset manifests, feature files and the synthetic toy corpus.

mod f32m;
mod manifest;
mod toy;
mod wav;

pub use f32m::{
    decode_f32m, encode_f32m, read_f32m, read_feature_matrix, write_f32m, write_feature_matrix,
    ImageFeatureTable,
};
pub use manifest::{
    load_manifest, manifest_to_string, parse_manifest, write_manifest, ManifestEntry, Split,
};
pub use toy::{
    gen_toy_corpus, ToyCorpusSpec, ToyOutput, TOY_IMAGE_FEATURES, TOY_MANIFEST, TOY_WORD_PREFIX,
};
pub use wav::{read_wav, write_wav, WAV_SAMPLE_RATE};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::frontend::{extract_with, FeatureMatrix, FrontendConfig, MfccAnalyzer};
use crate::{Error, Result};

/// Manifest entries with their features and the image table, all in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<FeatureMatrix>,
    pub images: ImageFeatureTable,
}

/// Index view of one split.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    /// Entry indices of the captions in this split, in manifest order.
    pub captions: Vec<usize>,
    /// Image table rows in order of first appearance.
    pub image_rows: Vec<usize>,
    /// For each caption, its image's position in `image_rows`.
    pub caption_image: Vec<usize>,
    /// For each image, positions (into `captions`) of its captions.
    pub image_captions: Vec<Vec<usize>>,
}

impl SplitData {
    pub fn n_images(&self) -> usize {
        self.image_rows.len()
    }

    pub fn n_captions(&self) -> usize {
        self.captions.len()
    }
}

/// Resolve a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Corpus {
    pub fn new(
        entries: Vec<ManifestEntry>,
        features: Vec<FeatureMatrix>,
        mut images: ImageFeatureTable,
    ) -> Result<Self> {
        if entries.len() != features.len() {
            return Err(Error::Validation(format!(
                "{} manifest entries but {} feature matrices",
                entries.len(),
                features.len()
            )));
        }
        images.attach_ids(&entries)?;
        Ok(Corpus {
            entries,
            features,
            images,
        })
    }

    /// Load a manifest, its image table and every utterance's features.
    /// Audio entries go through the MFCC front end; feature entries are read
    /// from F32M files.
    pub fn load(manifest: &Path, image_features: &Path, frontend: &FrontendConfig) -> Result<Self> {
        let entries = load_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let images = ImageFeatureTable::load(image_features)?;
        let analyzer = MfccAnalyzer::new(frontend)?;
        let features = entries
            .iter()
            .map(|e| load_entry_features(e, base, &analyzer))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, features, images)
    }

    pub fn split(&self, split: Split) -> SplitData {
        let mut out = SplitData::default();
        let mut pos_of_row: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, e) in self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
        {
            let pos = *pos_of_row.entry(e.image_feature_ref).or_insert_with(|| {
                out.image_rows.push(e.image_feature_ref);
                out.image_captions.push(Vec::new());
                out.image_rows.len() - 1
            });
            out.image_captions[pos].push(out.captions.len());
            out.captions.push(i);
            out.caption_image.push(pos);
        }
        out
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.features.first().map(|f| f.n_dims())
    }
}

/// Features for one manifest entry.
pub fn load_entry_features(
    e: &ManifestEntry,
    base: &Path,
    analyzer: &MfccAnalyzer,
) -> Result<FeatureMatrix> {
    match (&e.audio_path, &e.feature_path) {
        (Some(a), None) => {
            let w = read_wav(&resolve(base, a))?;
            extract_with(analyzer, &w)
        }
        (None, Some(f)) => read_feature_matrix(&resolve(base, f)),
        _ => Err(Error::Validation(format!(
            "entry {} must set exactly one of audio_path/feature_path",
            e.utterance_id
        ))),
    }
}
