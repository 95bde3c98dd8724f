//! Bidirectional hinge ranking loss over the hardest in-batch negatives.
//!
//! For every anchor caption `c_k`, the `m` mismatched images with the highest
//! cosine to `c_k` each contribute `max(0, cos(c_k, i_j) - cos(c_k, i_k) + α)`;
//! symmetrically for every anchor image over mismatched captions. With
//! `m = ceil(hard_fraction * (n - 1))`, `hard_fraction = 1` is the full sum.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, cosine_similarity_backward, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub hard_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            hard_fraction: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard_fraction must be in (0, 1], got {}",
                self.hard_fraction
            )));
        }
        Ok(())
    }

    /// Negatives kept per anchor in a batch of `n` pairs.
    pub fn negatives_per_anchor(&self, n: usize) -> usize {
        let candidates = n.saturating_sub(1);
        let m = (self.hard_fraction * candidates as f64 - 1e-9).ceil() as usize;
        m.clamp(1, candidates.max(1))
    }
}

/// Indices of the `m` largest entries, ties broken toward the lower index.
pub fn select_hard_negatives<F: Real>(sims: &[F], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Validation(
            "must select at least one negative".into(),
        ));
    }
    if m > sims.len() {
        return Err(Error::Validation(format!(
            "cannot select {m} negatives from {} candidates",
            sims.len()
        )));
    }
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// Matched caption/image embeddings; pair `k` is `(captions[k], images[k])`.
#[derive(Debug, Clone)]
pub struct PairBatch<F> {
    pub captions: Vec<Array1<F>>,
    pub images: Vec<Array1<F>>,
}

impl<F: Real> PairBatch<F> {
    pub fn new(captions: Vec<Array1<F>>, images: Vec<Array1<F>>) -> Result<Self> {
        if captions.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} captions but {} images",
                captions.len(),
                images.len()
            )));
        }
        Ok(PairBatch { captions, images })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// `S[k][j] = cos(c_k, i_j)`.
    pub fn similarities(&self) -> Result<Array2<F>> {
        let n = self.len();
        let mut s = Array2::zeros((n, n));
        for k in 0..n {
            for j in 0..n {
                s[[k, j]] = cosine_similarity(self.captions[k].view(), self.images[j].view())?;
            }
        }
        Ok(s)
    }
}

/// Loss value with its gradient with respect to the similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityLoss<F> {
    pub loss: F,
    pub d_sims: Array2<F>,
}

/// Hinge loss as a function of the caption x image cosine matrix.
pub fn hinge_loss_from_similarities<F: Real>(
    sims: ArrayView2<F>,
    cfg: &LossConfig,
) -> Result<SimilarityLoss<F>> {
    cfg.validate()?;
    let (n, n2) = sims.dim();
    if n != n2 {
        return Err(Error::Shape(format!("similarity matrix is {n}x{n2}")));
    }
    if n < 2 {
        return Err(Error::Validation(format!(
            "hinge loss needs at least 2 pairs, got {n}"
        )));
    }
    let m = cfg.negatives_per_anchor(n);
    let alpha = F::lit(cfg.margin);
    let mut loss = F::zero();
    let mut d = Array2::zeros((n, n));

    // Caption anchors: row k, negatives are images j != k.
    for k in 0..n {
        let (cands, vals): (Vec<usize>, Vec<F>) = (0..n)
            .filter(|&j| j != k)
            .map(|j| (j, sims[[k, j]]))
            .unzip();
        for pos in select_hard_negatives(&vals, m)? {
            let j = cands[pos];
            let term = sims[[k, j]] - sims[[k, k]] + alpha;
            if term > F::zero() {
                loss += term;
                d[[k, j]] += F::one();
                d[[k, k]] -= F::one();
            }
        }
    }
    // Image anchors: column k, negatives are captions j != k.
    for k in 0..n {
        let (cands, vals): (Vec<usize>, Vec<F>) = (0..n)
            .filter(|&j| j != k)
            .map(|j| (j, sims[[j, k]]))
            .unzip();
        for pos in select_hard_negatives(&vals, m)? {
            let j = cands[pos];
            let term = sims[[j, k]] - sims[[k, k]] + alpha;
            if term > F::zero() {
                loss += term;
                d[[j, k]] += F::one();
                d[[k, k]] -= F::one();
            }
        }
    }
    Ok(SimilarityLoss { loss, d_sims: d })
}

/// Loss and gradients with respect to every caption and image embedding.
#[derive(Debug, Clone)]
pub struct HingeOutput<F> {
    pub loss: F,
    pub d_captions: Vec<Array1<F>>,
    pub d_images: Vec<Array1<F>>,
}

pub fn hinge_loss<F: Real>(batch: &PairBatch<F>, cfg: &LossConfig) -> Result<HingeOutput<F>> {
    let sims = batch.similarities()?;
    let SimilarityLoss { loss, d_sims } = hinge_loss_from_similarities(sims.view(), cfg)?;
    let n = batch.len();
    let mut d_captions: Vec<Array1<F>> = batch
        .captions
        .iter()
        .map(|c| Array1::zeros(c.len()))
        .collect();
    let mut d_images: Vec<Array1<F>> = batch
        .images
        .iter()
        .map(|i| Array1::zeros(i.len()))
        .collect();
    for k in 0..n {
        for j in 0..n {
            let g = d_sims[[k, j]];
            if g != F::zero() {
                let (dc, di) =
                    cosine_similarity_backward(batch.captions[k].view(), batch.images[j].view(), g);
                d_captions[k] += &dc;
                d_images[j] += &di;
            }
        }
    }
    Ok(HingeOutput {
        loss,
        d_captions,
        d_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_enumerated_two_pair_batch() {
        // rows: captions, cols: images
        let sims: Array2<f64> = array![[0.9, 0.5], [0.85, 0.8]];
        let out = hinge_loss_from_similarities(sims.view(), &LossConfig::default()).unwrap();
        assert!((out.loss - 0.40).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn separated_batch_has_zero_loss() {
        let sims = array![[0.9, 0.1, 0.2], [0.0, 0.8, 0.3], [0.5, 0.4, 0.95]];
        let out = hinge_loss_from_similarities(sims.view(), &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_sims.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_hard_negatives(&[0.1, 0.9, 0.5], 1).unwrap(), vec![1]);
        assert_eq!(
            select_hard_negatives(&[0.1, 0.9, 0.5], 3).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(select_hard_negatives(&[0.5, 0.5, 0.3], 1).unwrap(), vec![0]);
        assert!(select_hard_negatives(&[0.5], 0).is_err());
        assert!(select_hard_negatives(&[0.5], 2).is_err());
    }

    #[test]
    fn negatives_per_anchor_uses_ceiling() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.negatives_per_anchor(2), 1);
        assert_eq!(cfg.negatives_per_anchor(5), 1);
        assert_eq!(cfg.negatives_per_anchor(6), 2);
        assert_eq!(cfg.negatives_per_anchor(32), 8);
        let full = LossConfig {
            hard_fraction: 1.0,
            ..cfg
        };
        assert_eq!(full.negatives_per_anchor(8), 7);
    }

    #[test]
    fn tiny_batch_and_bad_config_rejected() {
        let sims = array![[1.0]];
        assert!(hinge_loss_from_similarities(sims.view(), &LossConfig::default()).is_err());
        let bad = LossConfig {
            margin: 0.0,
            hard_fraction: 0.25,
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            margin: 0.2,
            hard_fraction: 0.0,
        };
        assert!(bad.validate().is_err());
    }
}
