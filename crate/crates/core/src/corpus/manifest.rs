use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One spoken caption. Exactly one of `audio_path` and `feature_path` is set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    pub image_feature_ref: usize,
    pub caption_text: String,
    pub split: Split,
}

// Split is read as a string so an unknown value is a validation error
// rather than a parse error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    utterance_id: String,
    image_id: String,
    #[serde(default)]
    audio_path: Option<String>,
    #[serde(default)]
    feature_path: Option<String>,
    image_feature_ref: usize,
    caption_text: String,
    split: String,
}

fn validate_line(raw: RawEntry, line: usize) -> Result<ManifestEntry> {
    if raw.audio_path.is_some() == raw.feature_path.is_some() {
        return Err(Error::Validation(format!(
            "line {line}: exactly one of audio_path/feature_path must be set"
        )));
    }
    let split = raw
        .split
        .parse::<Split>()
        .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
    Ok(ManifestEntry {
        utterance_id: raw.utterance_id,
        image_id: raw.image_id,
        audio_path: raw.audio_path,
        feature_path: raw.feature_path,
        image_feature_ref: raw.image_feature_ref,
        caption_text: raw.caption_text,
        split,
    })
}

/// Parse JSON-lines manifest text. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        entries.push(validate_line(raw, line_no)?);
    }
    check_consistency(&entries)?;
    Ok(entries)
}

/// Cross-entry invariants: one feature row per image, one split per image.
fn check_consistency(entries: &[ManifestEntry]) -> Result<()> {
    let mut by_image: BTreeMap<&str, (usize, Split)> = BTreeMap::new();
    let mut by_row: BTreeMap<usize, &str> = BTreeMap::new();
    for e in entries {
        match by_image.get(e.image_id.as_str()) {
            Some(&(row, _)) if row != e.image_feature_ref => {
                return Err(Error::Validation(format!(
                    "image {} refers to feature rows {row} and {}",
                    e.image_id, e.image_feature_ref
                )))
            }
            Some(&(_, split)) if split != e.split => {
                return Err(Error::Validation(format!(
                    "image {} appears in both {split} and {}",
                    e.image_id, e.split
                )))
            }
            Some(_) => {}
            None => {
                by_image.insert(&e.image_id, (e.image_feature_ref, e.split));
            }
        }
        if let Some(other) = by_row.insert(e.image_feature_ref, &e.image_id) {
            if other != e.image_id {
                return Err(Error::Validation(format!(
                    "feature row {} is shared by images {other} and {}",
                    e.image_feature_ref, e.image_id
                )));
            }
        }
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}
