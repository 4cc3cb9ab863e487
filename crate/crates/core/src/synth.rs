//! Synthetic co-traveler scenarios standing in for backbone-extracted features.
//!
//! Identities are unit vectors partitioned into small cliques ("groups") that tend
//! to appear together. A fraction of identities is paired into confusable twins
//! whose base vectors sit at a fixed small angle, always in different groups, so
//! appearance alone cannot tell them apart while their companions can.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{FeatureSet, Label};
use crate::tensor::{dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_identities: usize,
    pub dim: usize,
    pub n_images: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    pub group_min: usize,
    pub group_max: usize,
    pub co_travel_prob: f64,
    /// Per-coordinate standard deviation of the observation noise.
    pub noise_sigma: f64,
    /// Angle between twin base vectors, radians.
    pub ambiguity_delta: f64,
    pub confusable_fraction: f64,
    pub unlabeled_rate: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_identities: 40,
            dim: 64,
            n_images: 400,
            persons_min: 3,
            persons_max: 6,
            group_min: 2,
            group_max: 3,
            co_travel_prob: 0.8,
            noise_sigma: 0.1,
            ambiguity_delta: 0.05,
            confusable_fraction: 0.3,
            unlabeled_rate: 0.1,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, p) in [
            ("co_travel_prob", self.co_travel_prob),
            ("confusable_fraction", self.confusable_fraction),
            ("unlabeled_rate", self.unlabeled_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.ambiguity_delta >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("ambiguity_delta and noise_sigma must be non-negative");
        }
        if self.n_identities == 0 || self.n_images < 2 {
            return bad("need at least one identity and two images");
        }
        if self.persons_min == 0 || self.persons_min > self.persons_max {
            return bad("persons_min must be in 1..=persons_max");
        }
        if self.group_min == 0 || self.group_min > self.group_max {
            return bad("group_min must be in 1..=group_max");
        }
        if self.group_max > self.persons_max {
            return bad("group_max exceeds persons_max: groups could never appear together");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub dim: usize,
    pub n_identities: usize,
    pub images: Vec<FeatureSet>,
    /// Empty (`0 x dim`) when loaded from a file without a metadata record.
    pub identity_bases: Matrix,
    pub groups: Vec<Vec<u32>>,
    pub confusable_pairs: Vec<(u32, u32)>,
}

fn gaussian_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at angle `delta` from unit vector `a`.
fn rotate_away<R: Rng>(a: &[f64], delta: f64, rng: &mut R) -> Vec<f64> {
    let u = loop {
        let mut u = gaussian_unit(a.len(), rng);
        let p = dot(&u, a);
        u.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
        let n = norm(&u);
        if n > 1e-6 {
            break u.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = delta.sin_cos();
    a.iter().zip(&u).map(|(x, y)| c * x + s * y).collect()
}

fn observe<R: Rng>(base: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = base
            .iter()
            .map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic in `config.seed`.
pub fn generate(config: &ScenarioConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;

    let mut order: Vec<u32> = (0..config.n_identities as u32).collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut rest = &order[..];
    while !rest.is_empty() {
        let size = rng
            .gen_range(config.group_min..=config.group_max)
            .min(rest.len());
        groups.push(rest[..size].to_vec());
        rest = &rest[size..];
    }
    let mut group_of = vec![0usize; config.n_identities];
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            group_of[m as usize] = g;
        }
    }

    let want_pairs =
        ((config.confusable_fraction * config.n_identities as f64) / 2.0).round() as usize;
    let mut pool: Vec<u32> = (0..config.n_identities as u32).collect();
    pool.shuffle(&mut rng);
    let mut paired = vec![false; config.n_identities];
    let mut confusable_pairs = Vec::new();
    for i in 0..pool.len() {
        if confusable_pairs.len() == want_pairs {
            break;
        }
        let a = pool[i];
        if paired[a as usize] {
            continue;
        }
        if let Some(&b) = pool[i + 1..]
            .iter()
            .find(|&&b| !paired[b as usize] && group_of[b as usize] != group_of[a as usize])
        {
            paired[a as usize] = true;
            paired[b as usize] = true;
            confusable_pairs.push((a.min(b), a.max(b)));
        }
    }
    confusable_pairs.sort_unstable();

    let mut bases = Matrix::zeros(config.n_identities, d);
    for i in 0..config.n_identities {
        bases.row_mut(i).copy_from_slice(&gaussian_unit(d, &mut rng));
    }
    for &(a, b) in &confusable_pairs {
        let twin = rotate_away(bases.row(a as usize), config.ambiguity_delta, &mut rng);
        bases.row_mut(b as usize).copy_from_slice(&twin);
    }

    let mut raw_images: Vec<(Vec<Vec<f64>>, Vec<Label>)> = Vec::with_capacity(config.n_images);
    let mut group_order: Vec<usize> = (0..groups.len()).collect();
    for _ in 0..config.n_images {
        let n = rng.gen_range(config.persons_min..=config.persons_max);
        let unlabeled = if config.unlabeled_rate > 0.0 {
            Binomial::new(n as u64, config.unlabeled_rate)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let mut capacity = n - unlabeled;
        let mut members: Vec<u32> = Vec::new();
        group_order.shuffle(&mut rng);
        for &g in &group_order {
            if capacity == 0 {
                break;
            }
            // the fit test only looks at the full size, so appearing together stays
            // independent of whether the group was selected
            if groups[g].len() > capacity {
                continue;
            }
            if rng.gen_bool(config.co_travel_prob) {
                members.extend(&groups[g]);
                capacity -= groups[g].len();
            } else {
                members.push(*groups[g].choose(&mut rng).expect("non-empty group"));
                capacity -= 1;
            }
        }
        let mut persons: Vec<(Vec<f64>, Label)> = members
            .iter()
            .map(|&id| {
                (
                    observe(bases.row(id as usize), config.noise_sigma, &mut rng),
                    Some(id),
                )
            })
            .collect();
        for _ in 0..(n - members.len()) {
            persons.push((gaussian_unit(d, &mut rng), None));
        }
        persons.shuffle(&mut rng);
        let (feats, labels) = persons.into_iter().unzip();
        raw_images.push((feats, labels));
    }

    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for (_, labels) in &raw_images {
        let mut uniq: Vec<u32> = labels.iter().filter_map(|l| *l).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for id in uniq {
            *seen.entry(id).or_default() += 1;
        }
    }
    let mut images = Vec::with_capacity(raw_images.len());
    for (k, (feats, labels)) in raw_images.into_iter().enumerate() {
        // an identity seen in a single image has no gallery match; demote it
        let labels: Vec<Label> = labels
            .into_iter()
            .map(|l| l.filter(|id| seen.get(id).copied().unwrap_or(0) >= 2))
            .collect();
        let features = Matrix::from_rows(&feats, d)?;
        images.push(FeatureSet::new(k as u64, features, labels)?);
    }

    Ok(SyntheticDataset {
        dim: d,
        n_identities: config.n_identities,
        images,
        identity_bases: bases,
        groups,
        confusable_pairs,
    })
}

impl SyntheticDataset {
    pub fn image(&self, id: u64) -> Option<&FeatureSet> {
        self.images.iter().find(|im| im.image_id == id)
    }

    pub fn is_confusable(&self, id: u32) -> bool {
        self.confusable_pairs
            .iter()
            .any(|&(a, b)| a == id || b == id)
    }

    pub fn labeled_count(&self) -> usize {
        self.images.iter().map(|im| im.labeled_ids().count()).sum()
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = MetaRecord {
            meta: Meta {
                dim: self.dim,
                n_identities: self.n_identities,
                n_images: self.images.len(),
                identity_bases: self.identity_bases.iter_rows().map(|r| r.to_vec()).collect(),
                groups: self.groups.clone(),
                confusable_pairs: self.confusable_pairs.clone(),
            },
        };
        writeln!(w, "{}", to_json(&meta)?)?;
        for im in &self.images {
            let rec = ImageRecord {
                image_id: im.image_id,
                persons: im
                    .features
                    .iter_rows()
                    .zip(&im.labels)
                    .map(|(f, l)| PersonRecord {
                        id: *l,
                        feature: f.to_vec(),
                    })
                    .collect(),
            };
            writeln!(w, "{}", to_json(&rec)?)?;
        }
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut meta: Option<Meta> = None;
        let mut images = Vec::new();
        let mut dim: Option<usize> = None;
        let mut last_line = 0;
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let rec: Record = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
            match rec {
                Record::Meta(m) => {
                    if meta.is_some() || !images.is_empty() {
                        return Err(perr("metadata record must come first".into()));
                    }
                    dim = Some(m.meta.dim);
                    meta = Some(m.meta);
                }
                Record::Image(im) => {
                    let d = match dim {
                        Some(d) => d,
                        None => match im.persons.first() {
                            Some(p) => {
                                dim = Some(p.feature.len());
                                p.feature.len()
                            }
                            None => {
                                return Err(perr(
                                    "cannot infer dimension from an empty image".into(),
                                ))
                            }
                        },
                    };
                    let mut feats = Vec::with_capacity(im.persons.len());
                    let mut labels = Vec::with_capacity(im.persons.len());
                    for p in im.persons {
                        if p.feature.len() != d {
                            return Err(perr(format!(
                                "feature of length {} in a {d}-dimensional dataset",
                                p.feature.len()
                            )));
                        }
                        if p.feature.iter().any(|v| !v.is_finite()) {
                            return Err(perr("non-finite feature value".into()));
                        }
                        feats.push(p.feature);
                        labels.push(p.id);
                    }
                    let features = Matrix::from_rows(&feats, d).map_err(|e| perr(e.to_string()))?;
                    images.push(
                        FeatureSet::new(im.image_id, features, labels)
                            .map_err(|e| perr(e.to_string()))?,
                    );
                }
            }
        }
        let dim = dim.ok_or(Error::Parse {
            line: last_line.max(1),
            msg: "no records".into(),
        })?;
        let max_id = images
            .iter()
            .flat_map(|im| im.labeled_ids())
            .max()
            .map(|m| m as usize + 1)
            .unwrap_or(0);
        match meta {
            Some(m) => {
                if m.n_images != images.len() {
                    return Err(Error::Parse {
                        line: last_line + 1,
                        msg: format!(
                            "expected {} image records, found {} (truncated file?)",
                            m.n_images,
                            images.len()
                        ),
                    });
                }
                if max_id > m.n_identities {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("identity {} outside {} identities", max_id - 1, m.n_identities),
                    });
                }
                let bases = Matrix::from_rows(&m.identity_bases, dim).map_err(|e| Error::Parse {
                    line: 1,
                    msg: e.to_string(),
                })?;
                Ok(Self {
                    dim,
                    n_identities: m.n_identities,
                    images,
                    identity_bases: bases,
                    groups: m.groups,
                    confusable_pairs: m.confusable_pairs,
                })
            }
            None => Ok(Self {
                dim,
                n_identities: max_id,
                images,
                identity_bases: Matrix::zeros(0, dim),
                groups: Vec::new(),
                confusable_pairs: Vec::new(),
            }),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct Meta {
    dim: usize,
    n_identities: usize,
    n_images: usize,
    identity_bases: Vec<Vec<f64>>,
    groups: Vec<Vec<u32>>,
    confusable_pairs: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct PersonRecord {
    id: Option<u32>,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: u64,
    persons: Vec<PersonRecord>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Record {
    Meta(MetaRecord),
    Image(ImageRecord),
}
