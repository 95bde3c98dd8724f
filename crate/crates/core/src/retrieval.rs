//! Cross-modal retrieval metrics: recall at N, median rank, 95% intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RECALL_AT: [usize; 3] = [1, 5, 10];
const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    CaptionToImage,
    ImageToCaption,
}

impl RetrievalDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalDirection::CaptionToImage => "caption_to_image",
            RetrievalDirection::ImageToCaption => "image_to_caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: RetrievalDirection,
    pub n_queries: usize,
    /// Percentage of queries whose correct item is in the top N.
    pub r_at: BTreeMap<usize, f64>,
    /// Half-width of the normal-approximation 95% interval, in points.
    pub ci95: BTreeMap<usize, f64>,
    pub median_rank: f64,
}

impl RetrievalReport {
    pub fn recall(&self, n: usize) -> f64 {
        self.r_at.get(&n).copied().unwrap_or(f64::NAN)
    }
}

/// Both directions of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub caption_to_image: RetrievalReport,
    pub image_to_caption: RetrievalReport,
}

impl RetrievalResult {
    /// Sum of caption-to-image R@1, R@5 and R@10, used to rank snapshots.
    pub fn selector(&self) -> f64 {
        RECALL_AT
            .iter()
            .map(|&n| self.caption_to_image.recall(n))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,metric,value\n");
        for r in [&self.caption_to_image, &self.image_to_caption] {
            let d = r.direction.as_str();
            for n in RECALL_AT {
                let _ = writeln!(out, "{d},r_at_{n},{}", r.recall(n));
                let _ = writeln!(
                    out,
                    "{d},ci95_{n},{}",
                    r.ci95.get(&n).copied().unwrap_or(f64::NAN)
                );
            }
            let _ = writeln!(out, "{d},median_rank,{}", r.median_rank);
            let _ = writeln!(out, "{d},n_queries,{}", r.n_queries);
        }
        out
    }
}

/// Cosine similarities between every row of `a` and every row of `b`,
/// accumulated in f64.
pub fn cosine_matrix(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let unit = |m: ArrayView2<f32>, what: &str| -> Result<Array2<f64>> {
        let mut m = m.mapv(f64::from);
        for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "{what} embedding {i} has norm {norm}"
                )));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(m)
    };
    let a = unit(a, "query")?;
    let b = unit(b, "candidate")?;
    Ok(a.dot(&b.t()))
}

/// 1-based rank of candidate `target` in `row` under descending score;
/// equal scores keep candidate order.
fn stable_rank(row: ndarray::ArrayView1<f64>, target: usize) -> usize {
    let s = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Rank of each caption's image among all images.
pub fn rank_caption_to_image(
    captions: ArrayView2<f32>,
    images: ArrayView2<f32>,
    truth: &[usize],
) -> Result<Vec<usize>> {
    if truth.len() != captions.nrows() {
        return Err(Error::Validation(format!(
            "{} captions but {} truth labels",
            captions.nrows(),
            truth.len()
        )));
    }
    if let Some((c, &t)) = truth.iter().enumerate().find(|(_, &t)| t >= images.nrows()) {
        return Err(Error::Validation(format!(
            "caption {c} points at image {t}, only {} images",
            images.nrows()
        )));
    }
    let sims = cosine_matrix(captions, images)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(c, &t)| stable_rank(sims.row(c), t))
        .collect())
}

/// Rank of each image's best-ranked correct caption among all captions.
pub fn rank_image_to_caption(
    images: ArrayView2<f32>,
    captions: ArrayView2<f32>,
    truth: &[Vec<usize>],
) -> Result<Vec<usize>> {
    if truth.len() != images.nrows() {
        return Err(Error::Validation(format!(
            "{} images but {} truth sets",
            images.nrows(),
            truth.len()
        )));
    }
    for (i, set) in truth.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Validation(format!("image {i} has no captions")));
        }
        if let Some(&c) = set.iter().find(|&&c| c >= captions.nrows()) {
            return Err(Error::Validation(format!(
                "image {i} points at caption {c}, only {} captions",
                captions.nrows()
            )));
        }
    }
    let sims = cosine_matrix(images, captions)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, set)| {
            set.iter()
                .map(|&c| stable_rank(sims.row(i), c))
                .min()
                .expect("nonempty")
        })
        .collect())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Normal-approximation 95% half-width, in percentage points.
pub fn ci95(p: f64, n: usize) -> f64 {
    Z95 * (p * (1.0 - p) / n as f64).sqrt() * 100.0
}

pub fn summarize(ranks: &[usize], direction: RetrievalDirection) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::Validation(
            "cannot summarize an empty rank list".into(),
        ));
    }
    if ranks.contains(&0) {
        return Err(Error::Validation("ranks are 1-based".into()));
    }
    let n = ranks.len();
    let mut r_at = BTreeMap::new();
    let mut ci = BTreeMap::new();
    for k in RECALL_AT {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        let p = hits as f64 / n as f64;
        r_at.insert(k, 100.0 * hits as f64 / n as f64);
        ci.insert(k, ci95(p, n));
    }
    let as_f64: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    Ok(RetrievalReport {
        direction,
        n_queries: n,
        r_at,
        ci95: ci,
        median_rank: median(&as_f64).expect("nonempty"),
    })
}

/// Evaluate both directions. `caption_image[c]` is the image row of caption c.
pub fn evaluate_retrieval(
    captions: ArrayView2<f32>,
    images: ArrayView2<f32>,
    caption_image: &[usize],
) -> Result<RetrievalResult> {
    let c2i = rank_caption_to_image(captions, images, caption_image)?;
    let mut by_image = vec![Vec::new(); images.nrows()];
    for (c, &i) in caption_image.iter().enumerate() {
        by_image[i].push(c);
    }
    let i2c = rank_image_to_caption(images, captions, &by_image)?;
    Ok(RetrievalResult {
        caption_to_image: summarize(&c2i, RetrievalDirection::CaptionToImage)?,
        image_to_caption: summarize(&i2c, RetrievalDirection::ImageToCaption)?,
    })
}
