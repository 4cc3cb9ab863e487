//! Image memory bank: the most recent labeled and unlabeled features of every image,
//! plus the appointed training partner of each image.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Error, Result};
use crate::head::{FeatureSet, Label};
use crate::tensor::Matrix;

/// For each image, the other image sharing the most labeled identities.
///
/// Ties go to the smallest image id. An image overlapping with nobody gets a
/// seeded uniform pick among the other images.
pub fn appoint_pairs(images: &[FeatureSet], seed: u64) -> Result<BTreeMap<u64, u64>> {
    if images.len() < 2 {
        return Err(Error::SingleImage);
    }
    let ids: Vec<(u64, BTreeSet<u32>)> = images
        .iter()
        .map(|im| (im.image_id, im.labeled_ids().collect()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeMap::new();
    for (i, (id, own)) in ids.iter().enumerate() {
        let mut best: Option<(usize, u64)> = None;
        for (j, (other, theirs)) in ids.iter().enumerate() {
            if i == j {
                continue;
            }
            let overlap = own.intersection(theirs).count();
            if overlap == 0 {
                continue;
            }
            best = match best {
                Some((o, b)) if o > overlap || (o == overlap && b <= *other) => Some((o, b)),
                _ => Some((overlap, *other)),
            };
        }
        let pick = match best {
            Some((_, b)) => b,
            None => {
                let others: Vec<u64> = ids
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, (o, _))| *o)
                    .collect();
                *others.choose(&mut rng).expect("at least two images")
            }
        };
        pairs.insert(*id, pick);
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BankEntry {
    pub labeled: Matrix,
    pub labels: Vec<u32>,
    pub unlabeled: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMemoryBank {
    dim: usize,
    /// Ground-truth labeled identities per image, in row order.
    truth: BTreeMap<u64, Vec<u32>>,
    entries: BTreeMap<u64, BankEntry>,
    pairs: BTreeMap<u64, u64>,
    /// Blend factor for the optional momentum variant; `None` is direct replacement.
    momentum: Option<f64>,
}

/// Pair image exists but has not been written yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColdPair(pub u64);

impl ImageMemoryBank {
    pub fn new(images: &[FeatureSet], pairs: BTreeMap<u64, u64>) -> Self {
        let dim = images.first().map(|i| i.dim()).unwrap_or(0);
        let truth = images
            .iter()
            .map(|im| (im.image_id, im.labeled_ids().collect()))
            .collect();
        Self {
            dim,
            truth,
            entries: BTreeMap::new(),
            pairs,
            momentum: None,
        }
    }

    pub fn with_momentum(mut self, momentum: Option<f64>) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &BTreeMap<u64, u64> {
        &self.pairs
    }

    pub fn pair_of(&self, image: u64) -> Option<u64> {
        self.pairs.get(&image).copied()
    }

    pub fn is_written(&self, image: u64) -> bool {
        self.entries.contains_key(&image)
    }

    pub fn written_images(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Replaces `L_I` with `labeled` and `U_I` with `unlabeled`.
    pub fn update(&mut self, image: u64, labeled: &Matrix, unlabeled: &Matrix) -> Result<()> {
        let truth = self.truth.get(&image).ok_or(Error::UnknownImage(image))?;
        if labeled.rows() != truth.len() {
            return Err(Error::BankRowCount {
                image,
                expected: truth.len(),
                got: labeled.rows(),
            });
        }
        for m in [labeled, unlabeled] {
            if m.rows() > 0 && m.cols() != self.dim {
                return Err(shape(
                    "imb_update",
                    format!("feature dim {} vs bank dim {}", m.cols(), self.dim),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("imb_update"));
            }
        }
        let labeled = match (self.momentum, self.entries.get(&image)) {
            (Some(g), Some(prev)) => {
                let mut blended = prev.labeled.clone();
                for (b, x) in blended.data_mut().iter_mut().zip(labeled.data()) {
                    *b = g * *b + (1.0 - g) * x;
                }
                blended
            }
            _ => labeled.clone(),
        };
        self.entries.insert(
            image,
            BankEntry {
                labeled,
                labels: truth.clone(),
                unlabeled: if unlabeled.rows() == 0 {
                    Matrix::zeros(0, self.dim)
                } else {
                    unlabeled.clone()
                },
            },
        );
        Ok(())
    }

    /// Splits an image's rows by label and writes them.
    pub fn update_from(&mut self, image: &FeatureSet) -> Result<()> {
        let (labeled, unlabeled) = split_by_label(&image.features, &image.labels);
        self.update(image.image_id, &labeled, &unlabeled)
    }

    /// Stored features of one image: labeled rows first, then unlabeled rows.
    pub fn fetch(&self, image: u64) -> Option<FeatureSet> {
        let e = self.entries.get(&image)?;
        let features = e
            .labeled
            .vstack(&e.unlabeled)
            .expect("bank entries share one dimension");
        let labels: Vec<Label> = e
            .labels
            .iter()
            .map(|l| Some(*l))
            .chain(std::iter::repeat(None).take(e.unlabeled.rows()))
            .collect();
        Some(FeatureSet {
            image_id: image,
            features,
            labels,
        })
    }

    /// Stored features of the pair image appointed to `image`.
    pub fn fetch_pair(&self, image: u64) -> Result<std::result::Result<FeatureSet, ColdPair>> {
        let pair = self.pair_of(image).ok_or(Error::UnknownImage(image))?;
        Ok(self.fetch(pair).ok_or(ColdPair(pair)))
    }

    pub(crate) fn entries(&self) -> &BTreeMap<u64, BankEntry> {
        &self.entries
    }

    pub(crate) fn truth(&self) -> &BTreeMap<u64, Vec<u32>> {
        &self.truth
    }

    pub(crate) fn restore(
        dim: usize,
        truth: BTreeMap<u64, Vec<u32>>,
        entries: BTreeMap<u64, BankEntry>,
        pairs: BTreeMap<u64, u64>,
    ) -> Self {
        Self {
            dim,
            truth,
            entries,
            pairs,
            momentum: None,
        }
    }
}

/// Rows with a label, then rows without, in original order.
pub fn split_by_label(features: &Matrix, labels: &[Label]) -> (Matrix, Matrix) {
    let lab: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let unl: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
    (features.select_rows(&lab), features.select_rows(&unl))
}
