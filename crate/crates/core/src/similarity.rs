//! Search scores from embedding triplets: contextual similarity, fusion with the
//! appearance score, and per-gallery-image rescaling.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::head::{pair_forward, AcaeParams, ContextualEmbeddings, IntraOutput};
use crate::tensor::{dot, Matrix};

/// Which of the three embedding pairs enter the contextual similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsetFlags {
    pub intra: bool,
    pub inter: bool,
    pub final_: bool,
}

impl SubsetFlags {
    pub const ALL: SubsetFlags = SubsetFlags {
        intra: true,
        inter: true,
        final_: true,
    };
    pub const NONE: SubsetFlags = SubsetFlags {
        intra: false,
        inter: false,
        final_: false,
    };

    pub fn count(self) -> usize {
        self.intra as usize + self.inter as usize + self.final_ as usize
    }

    /// The seven non-empty combinations, "overall" first.
    pub fn non_empty() -> Vec<SubsetFlags> {
        let mut out: Vec<SubsetFlags> = (1u8..8)
            .map(|bits| SubsetFlags {
                intra: bits & 1 != 0,
                inter: bits & 2 != 0,
                final_: bits & 4 != 0,
            })
            .collect();
        out.sort_by_key(|s| std::cmp::Reverse(s.count()));
        out
    }

    /// Short label: `overall`, `intra-excluded`, `final-only`, ...
    pub fn label(self) -> String {
        let names = [
            (self.intra, "intra"),
            (self.inter, "inter"),
            (self.final_, "final"),
        ];
        match self.count() {
            0 => "none".to_string(),
            3 => "overall".to_string(),
            2 => {
                let missing = names.iter().find(|(on, _)| !on).unwrap().1;
                format!("{missing}-excluded")
            }
            _ => {
                let only = names.iter().find(|(on, _)| *on).unwrap().1;
                format!("{only}-only")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub subset: SubsetFlags,
    pub rescale: bool,
    /// L2-normalize every embedding row before dot products.
    pub normalize: bool,
}

pub const DEFAULT_LAMBDA: f64 = 0.4;

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            subset: SubsetFlags::ALL,
            rescale: true,
            normalize: true,
        }
    }
}

impl FusionConfig {
    /// Appearance-only scoring: no context, no rescaling.
    pub fn baseline() -> Self {
        Self {
            lambda: 0.0,
            subset: SubsetFlags::ALL,
            rescale: false,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "fusion lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.lambda > 0.0 && self.subset.count() == 0 {
            return Err(Error::EmptySubset);
        }
        Ok(())
    }
}

fn pair_dots(a: &Matrix, b: &Matrix, normalize: bool) -> Matrix {
    let (a, b) = if normalize {
        (a.l2_normalized_rows(), b.l2_normalized_rows())
    } else {
        (a.clone(), b.clone())
    };
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    out
}

/// Appearance score `p_i · q_j` between every row of `a` and every row of `b`.
pub fn appearance_similarity(a: &Matrix, b: &Matrix, normalize: bool) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(shape(
            "appearance_similarity",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    Ok(pair_dots(a, b, normalize))
}

/// Mean of the enabled embedding-pair dot products.
pub fn contextual_similarity(
    ea: &ContextualEmbeddings,
    eb: &ContextualEmbeddings,
    cfg: &FusionConfig,
) -> Result<Matrix> {
    let k = cfg.subset.count();
    if k == 0 {
        return Err(Error::EmptySubset);
    }
    if ea.final_.cols() != eb.final_.cols() {
        return Err(shape(
            "contextual_similarity",
            format!("{} vs {} columns", ea.final_.cols(), eb.final_.cols()),
        ));
    }
    let mut out = Matrix::zeros(ea.final_.rows(), eb.final_.rows());
    for (on, a, b) in [
        (cfg.subset.intra, &ea.intra, &eb.intra),
        (cfg.subset.inter, &ea.inter, &eb.inter),
        (cfg.subset.final_, &ea.final_, &eb.final_),
    ] {
        if on {
            out.add_assign(&pair_dots(a, b, cfg.normalize))?;
        }
    }
    out.scale(1.0 / k as f64);
    Ok(out)
}

/// `lambda * s_c + (1 - lambda) * s_a`.
pub fn fuse(s_c: &Matrix, s_a: &Matrix, lambda: f64) -> Result<Matrix> {
    if s_c.shape() != s_a.shape() {
        return Err(shape(
            "fuse",
            format!("{:?} vs {:?}", s_c.shape(), s_a.shape()),
        ));
    }
    let data = s_c
        .data()
        .iter()
        .zip(s_a.data())
        .map(|(c, a)| fuse_scalar(*c, *a, lambda))
        .collect();
    Matrix::new(s_c.rows(), s_c.cols(), data)
}

#[inline]
pub fn fuse_scalar(s_c: f64, s_a: f64, lambda: f64) -> f64 {
    lambda * s_c + (1.0 - lambda) * s_a
}

/// Per-candidate factors `c_j / max_{k in G} c_k` with `c = softmax(s)` inside each group.
pub fn rescale_factors(s_row: &[f64], groups: &[Range<usize>]) -> Vec<f64> {
    let mut f = vec![1.0; s_row.len()];
    for g in groups {
        if g.is_empty() {
            continue;
        }
        let seg = &s_row[g.clone()];
        let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = seg.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let c: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let cmax = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (k, cj) in g.clone().zip(&c) {
            f[k] = cj / cmax;
        }
    }
    f
}

/// Rescales scores within each gallery image; candidates in different groups never interact.
pub fn rescale_gallery(s_row: &[f64], groups: &[Range<usize>]) -> Vec<f64> {
    rescale_factors(s_row, groups)
        .into_iter()
        .zip(s_row)
        .map(|(f, s)| f * s)
        .collect()
}

/// Raw score components for one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub appearance: f64,
    pub intra: f64,
    pub inter: f64,
    pub final_: f64,
}

impl Components {
    pub fn contextual(&self, subset: SubsetFlags) -> f64 {
        let mut s = 0.0;
        if subset.intra {
            s += self.intra;
        }
        if subset.inter {
            s += self.inter;
        }
        if subset.final_ {
            s += self.final_;
        }
        s / subset.count().max(1) as f64
    }
}

/// One gallery image's slice of the candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryGroup {
    pub image_id: u64,
    pub range: Range<usize>,
}

/// Scores of one query against every candidate in its gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredGallery {
    pub groups: Vec<GalleryGroup>,
    pub components: Vec<Components>,
    pub contextual: Vec<f64>,
    pub fused: Vec<f64>,
    /// Equal to `fused` when rescaling is off.
    pub rescaled: Vec<f64>,
}

impl ScoredGallery {
    pub fn from_components(
        groups: Vec<GalleryGroup>,
        components: Vec<Components>,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let contextual: Vec<f64> = if cfg.subset.count() == 0 {
            vec![0.0; components.len()]
        } else {
            components.iter().map(|c| c.contextual(cfg.subset)).collect()
        };
        let fused: Vec<f64> = components
            .iter()
            .zip(&contextual)
            .map(|(c, sc)| fuse_scalar(*sc, c.appearance, cfg.lambda))
            .collect();
        let rescaled = if cfg.rescale {
            let ranges: Vec<_> = groups.iter().map(|g| g.range.clone()).collect();
            rescale_gallery(&fused, &ranges)
        } else {
            fused.clone()
        };
        Ok(Self {
            groups,
            components,
            contextual,
            fused,
            rescaled,
        })
    }

    /// Same components, different fusion settings.
    pub fn refuse(&self, cfg: &FusionConfig) -> Result<Self> {
        Self::from_components(self.groups.clone(), self.components.clone(), cfg)
    }

    /// Final scores used for ranking.
    pub fn scores(&self) -> &[f64] {
        &self.rescaled
    }

    /// Candidate indices sorted by descending score; ties keep candidate order.
    pub fn ranking(&self) -> Vec<usize> {
        rank_desc(&self.rescaled)
    }
}

pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Components of every query row against every row of one gallery image:
/// `out[query_row][candidate]`. Without parameters only the appearance term is filled.
pub fn pair_components(
    query: &IntraOutput,
    gallery: &IntraOutput,
    params: Option<&AcaeParams>,
    normalize: bool,
) -> Result<Vec<Vec<Components>>> {
    let p = match params {
        Some(p) => p,
        None => return appearance_components(&query.features, &gallery.features, normalize),
    };
    let sa = appearance_similarity(&query.features, &gallery.features, normalize)?;
    let pair = pair_forward(query, gallery, p)?;
    let parts = [
        pair_dots(&pair.a.intra, &pair.b.intra, normalize),
        pair_dots(&pair.a.inter, &pair.b.inter, normalize),
        pair_dots(&pair.a.final_, &pair.b.final_, normalize),
    ];
    Ok((0..sa.rows())
        .map(|i| {
            (0..sa.cols())
                .map(|j| Components {
                    appearance: sa.get(i, j),
                    intra: parts[0].get(i, j),
                    inter: parts[1].get(i, j),
                    final_: parts[2].get(i, j),
                })
                .collect()
        })
        .collect())
}

/// Appearance-only components; the contextual terms are zero.
pub fn appearance_components(a: &Matrix, b: &Matrix, normalize: bool) -> Result<Vec<Vec<Components>>> {
    let sa = appearance_similarity(a, b, normalize)?;
    Ok((0..sa.rows())
        .map(|i| {
            (0..sa.cols())
                .map(|j| Components {
                    appearance: sa.get(i, j),
                    intra: 0.0,
                    inter: 0.0,
                    final_: 0.0,
                })
                .collect()
        })
        .collect())
}

/// Raw components of row `query_row` of the query image against each gallery image.
///
/// Each gallery image is paired with the query image through the head independently.
pub fn score_components(
    query: &IntraOutput,
    query_row: usize,
    gallery: &[(u64, &IntraOutput)],
    params: Option<&AcaeParams>,
    normalize: bool,
) -> Result<(Vec<GalleryGroup>, Vec<Components>)> {
    if query_row >= query.features.rows() {
        return Err(shape(
            "score_query",
            format!("query row {query_row} of {}", query.features.rows()),
        ));
    }
    let mut groups = Vec::with_capacity(gallery.len());
    let mut comps = Vec::new();
    for (image_id, g) in gallery {
        let start = comps.len();
        let mut rows = pair_components(query, g, params, normalize)?;
        comps.append(&mut rows[query_row]);
        groups.push(GalleryGroup {
            image_id: *image_id,
            range: start..comps.len(),
        });
    }
    Ok((groups, comps))
}

/// Full scoring of one query: components, fusion and (optionally) rescaling.
pub fn score_query(
    query: &IntraOutput,
    query_row: usize,
    gallery: &[(u64, &IntraOutput)],
    params: &AcaeParams,
    cfg: &FusionConfig,
) -> Result<ScoredGallery> {
    let (groups, comps) = score_components(query, query_row, gallery, Some(params), cfg.normalize)?;
    ScoredGallery::from_components(groups, comps, cfg)
}
