//! Retrieval evaluation: query and gallery construction, AP and CMC, and the
//! lambda and feature-subset sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::head::{prepare, AcaeParams, FeatureSet, IntraOutput};
use crate::seed::split_seed;
use crate::similarity::{
    appearance_components, pair_components, rank_desc, Components, FusionConfig, GalleryGroup, ScoredGallery, SubsetFlags,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Gallery images per query, clamped to the number of other images.
    pub gallery_size: usize,
    pub seed: u64,
    /// Seeded subsample of the query list.
    pub max_queries: Option<usize>,
    /// Cosine scores (L2-normalize every row before dot products).
    pub normalize: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            gallery_size: 100,
            seed: 0,
            max_queries: None,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image_id: u64,
    pub row: usize,
    pub identity: u32,
    /// Sorted gallery image ids; at least one holds `identity`.
    pub gallery: Vec<u64>,
}

/// Every labeled person whose identity also appears in another image becomes a query.
pub fn build_queries(images: &[FeatureSet], protocol: &EvalProtocol) -> Result<Vec<Query>> {
    if protocol.gallery_size == 0 {
        return Err(Error::Config("gallery_size must be at least 1".into()));
    }
    let mut holders: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    for im in images {
        for id in im.labeled_ids() {
            holders.entry(id).or_default().insert(im.image_id);
        }
    }
    let mut candidates = Vec::new();
    for im in images {
        for (row, l) in im.labels.iter().enumerate() {
            if let Some(id) = l {
                if holders[id].iter().any(|&g| g != im.image_id) {
                    candidates.push((im.image_id, row, *id));
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoQueries);
    }
    if let Some(max) = protocol.max_queries {
        if max < candidates.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(protocol.seed, u64::MAX));
            let mut keep: Vec<usize> = (0..candidates.len()).collect();
            keep.shuffle(&mut rng);
            keep.truncate(max);
            keep.sort_unstable();
            candidates = keep.into_iter().map(|i| candidates[i]).collect();
        }
    }
    let all_ids: Vec<u64> = images.iter().map(|im| im.image_id).collect();
    let mut out = Vec::with_capacity(candidates.len());
    for (qi, (image_id, row, identity)) in candidates.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(protocol.seed, qi as u64));
        let mut others: Vec<u64> = all_ids.iter().copied().filter(|&g| g != image_id).collect();
        others.shuffle(&mut rng);
        others.truncate(protocol.gallery_size);
        let matches = &holders[&identity];
        if !others.iter().any(|g| matches.contains(g)) {
            let pool: Vec<u64> = matches.iter().copied().filter(|&g| g != image_id).collect();
            let forced = *pool.choose(&mut rng).expect("query has a match elsewhere");
            let last = others.len() - 1;
            others[last] = forced;
        }
        others.sort_unstable();
        out.push(Query {
            image_id,
            row,
            identity,
            gallery: others,
        });
    }
    Ok(out)
}

/// Precision-at-hit averaged over relevant positions; `None` without relevant items.
///
/// The sum is carried as an unevaluated pair `hi + lo` with error-free residuals, so
/// the result is the correctly rounded value of the exact rational in practice
/// (for example `[1, 0, 1]` gives exactly `5.0 / 6.0`).
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            let (j, k) = (hits as f64, (k + 1) as f64);
            let t = j / k;
            let residual = (-t).mul_add(k, j) / k;
            let (s, e) = two_sum(hi, t);
            hi = s;
            lo += e + residual;
        }
    }
    if hits == 0 {
        return None;
    }
    let h = hits as f64;
    let q = hi / h;
    let r = (-q).mul_add(h, hi) + lo;
    Some(q + r / h)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

pub fn hit_at(ranked_relevance: &[bool], k: usize) -> bool {
    ranked_relevance.iter().take(k).any(|&r| r)
}

/// Raw score components of one query against its whole gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryComponents {
    pub query: Query,
    pub groups: Vec<GalleryGroup>,
    pub components: Vec<Components>,
    pub relevant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentTable {
    pub queries: Vec<QueryComponents>,
    pub with_head: bool,
}

/// Scores every query once. Fusion settings are applied afterwards, so one table
/// serves any number of configurations.
pub fn compute_components(
    images: &[FeatureSet],
    params: Option<&AcaeParams>,
    protocol: &EvalProtocol,
    exec: Execution,
) -> Result<ComponentTable> {
    let queries = build_queries(images, protocol)?;
    let index: BTreeMap<u64, usize> = images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.image_id, i))
        .collect();
    // intra outputs are only needed when the head runs
    let prepared: Vec<Option<IntraOutput>> = match params {
        Some(p) => exec
            .map(images, |im| prepare(&im.features, p).map(Some))
            .into_iter()
            .collect::<Result<_>>()?,
        None => vec![None; images.len()],
    };

    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_image.entry(q.image_id).or_default().push(i);
    }
    let work: Vec<(u64, Vec<usize>)> = by_image.into_iter().collect();
    let per_image = exec.map(&work, |(image_id, qs)| -> Result<Vec<QueryComponents>> {
        let qi = index[image_id];
        let needed: BTreeSet<u64> = qs
            .iter()
            .flat_map(|&q| queries[q].gallery.iter().copied())
            .collect();
        let mut cache: BTreeMap<u64, Vec<Vec<Components>>> = BTreeMap::new();
        for g in needed {
            let gi = index[&g];
            let rows = match (&prepared[qi], &prepared[gi], params) {
                (Some(a), Some(b), Some(p)) => pair_components(a, b, Some(p), protocol.normalize)?,
                _ => appearance_components(
                    &images[qi].features,
                    &images[gi].features,
                    protocol.normalize,
                )?,
            };
            cache.insert(g, rows);
        }
        Ok(qs
            .iter()
            .map(|&q| {
                let query = &queries[q];
                let mut groups = Vec::with_capacity(query.gallery.len());
                let mut components = Vec::new();
                let mut relevant = Vec::new();
                for g in &query.gallery {
                    let start = components.len();
                    components.extend_from_slice(&cache[g][query.row]);
                    relevant.extend(
                        images[index[g]]
                            .labels
                            .iter()
                            .map(|l| *l == Some(query.identity)),
                    );
                    groups.push(GalleryGroup {
                        image_id: *g,
                        range: start..components.len(),
                    });
                }
                QueryComponents {
                    query: query.clone(),
                    groups,
                    components,
                    relevant,
                }
            })
            .collect())
    });
    let mut slots: Vec<Option<QueryComponents>> = vec![None; queries.len()];
    for ((_, qs), res) in work.iter().zip(per_image) {
        for (q, qc) in qs.iter().zip(res?) {
            slots[*q] = Some(qc);
        }
    }
    Ok(ComponentTable {
        queries: slots
            .into_iter()
            .map(|s| s.expect("every query scored"))
            .collect(),
        with_head: params.is_some(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config: FusionConfig,
    pub metrics: Metrics,
    pub per_query_ap: Vec<f64>,
}

/// Aggregates per-query rankings (each a relevance list in rank order).
pub fn metrics_from_rankings(rankings: &[Vec<bool>]) -> Result<(Metrics, Vec<f64>)> {
    let mut aps = Vec::with_capacity(rankings.len());
    let (mut h1, mut h5, mut h10) = (0usize, 0usize, 0usize);
    let mut skipped = 0;
    for r in rankings {
        match average_precision(r) {
            Some(ap) => {
                aps.push(ap);
                h1 += hit_at(r, 1) as usize;
                h5 += hit_at(r, 5) as usize;
                h10 += hit_at(r, 10) as usize;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without a relevant candidate excluded from mAP");
    }
    if aps.is_empty() {
        return Err(Error::NoQueries);
    }
    let n = aps.len() as f64;
    Ok((
        Metrics {
            map: aps.iter().sum::<f64>() / n,
            top1: h1 as f64 / n,
            top5: h5 as f64 / n,
            top10: h10 as f64 / n,
            queries: aps.len(),
        },
        aps,
    ))
}

pub fn evaluate_table(table: &ComponentTable, cfg: &FusionConfig, label: &str) -> Result<EvalReport> {
    if cfg.lambda > 0.0 && !table.with_head {
        return Err(Error::Config(
            "contextual fusion needs a table computed with the head".into(),
        ));
    }
    let mut rankings = Vec::with_capacity(table.queries.len());
    for q in &table.queries {
        let scored = ScoredGallery::from_components(q.groups.clone(), q.components.clone(), cfg)?;
        rankings.push(
            rank_desc(scored.scores())
                .into_iter()
                .map(|c| q.relevant[c])
                .collect(),
        );
    }
    let (metrics, per_query_ap) = metrics_from_rankings(&rankings)?;
    Ok(EvalReport {
        label: label.to_string(),
        config: *cfg,
        metrics,
        per_query_ap,
    })
}

/// Builds the table and scores one configuration.
pub fn evaluate(
    images: &[FeatureSet],
    params: Option<&AcaeParams>,
    protocol: &EvalProtocol,
    cfg: &FusionConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let params = if cfg.lambda > 0.0 { params } else { None };
    let table = compute_components(images, params, protocol, exec)?;
    evaluate_table(&table, cfg, if cfg.lambda > 0.0 { "acae" } else { "baseline" })
}

/// One row per lambda. A zero lambda is the plain appearance baseline (no rescaling).
pub fn sweep_lambda(table: &ComponentTable, lambdas: &[f64], base: &FusionConfig) -> Result<Vec<EvalReport>> {
    lambdas
        .iter()
        .map(|&l| {
            if l == 0.0 {
                evaluate_table(table, &FusionConfig::baseline(), "lambda=0")
            } else {
                let cfg = FusionConfig { lambda: l, ..*base };
                evaluate_table(table, &cfg, &format!("lambda={l}"))
            }
        })
        .collect()
}

/// Baseline followed by the seven non-empty feature subsets.
pub fn sweep_subsets(table: &ComponentTable, base: &FusionConfig) -> Result<Vec<EvalReport>> {
    let mut out = vec![evaluate_table(table, &FusionConfig::baseline(), "baseline")?];
    for subset in SubsetFlags::non_empty() {
        let cfg = FusionConfig { subset, ..*base };
        out.push(evaluate_table(table, &cfg, &subset.label())?);
    }
    Ok(out)
}

/// Wall-clock cost of building a component table.
pub fn timed_components(
    images: &[FeatureSet],
    params: Option<&AcaeParams>,
    protocol: &EvalProtocol,
    exec: Execution,
) -> Result<(ComponentTable, f64)> {
    let t = Instant::now();
    let table = compute_components(images, params, protocol, exec)?;
    Ok((table, t.elapsed().as_secs_f64()))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Aligned text table, one row per report, metrics in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.label.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}",
        "config", "mAP", "top-1", "top-5", "top-10"
    );
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}",
            r.label,
            pct(m.map),
            pct(m.top1),
            pct(m.top5),
            pct(m.top10)
        );
    }
    s
}

/// Baseline, ACAE and their difference per metric.
pub fn render_side_by_side(baseline: &EvalReport, acae: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<7}  {:>9}  {:>7}  {:>7}", "metric", "baseline", "acae", "delta");
    let (b, a) = (&baseline.metrics, &acae.metrics);
    for (name, x, y) in [
        ("mAP", b.map, a.map),
        ("top-1", b.top1, a.top1),
        ("top-5", b.top5, a.top5),
        ("top-10", b.top10, a.top10),
    ] {
        let _ = writeln!(
            s,
            "{:<7}  {:>9}  {:>7}  {:>+7.2}",
            name,
            pct(x),
            pct(y),
            100.0 * (y - x)
        );
    }
    s
}

/// Machine-readable rows: one JSON object per report, per-query APs omitted.
pub fn render_rows(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let row = serde_json::json!({
            "config": r.label,
            "lambda": r.config.lambda,
            "intra": r.config.subset.intra,
            "inter": r.config.subset.inter,
            "final": r.config.subset.final_,
            "rescale": r.config.rescale,
            "map": r.metrics.map,
            "top1": r.metrics.top1,
            "top5": r.metrics.top5,
            "top10": r.metrics.top10,
            "queries": r.metrics.queries,
        });
        let _ = writeln!(s, "{row}");
    }
    s
}
