//! k-reciprocal re-ranking over appearance features.
//!
//! Distances are squared Euclidean distances of unit rows, `d = 2 - 2 cos`. The final
//! distance blends the original one with the Jaccard distance between k-reciprocal
//! encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metrics_from_rankings, ComponentTable, EvalReport};
use crate::exec::Execution;
use crate::head::FeatureSet;
use crate::similarity::FusionConfig;
use crate::tensor::{matmul_bt, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k2 == 0 || self.k1 <= self.k2 {
            return Err(Error::Config("k-reciprocal needs k1 > k2 >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("rerank lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Default search grid.
    pub fn grid() -> Vec<RerankParams> {
        let mut out = Vec::new();
        for k1 in [10, 20, 30] {
            for k2 in [3, 6] {
                for lambda in [0.3, 0.5, 0.7] {
                    out.push(RerankParams { k1, k2, lambda });
                }
            }
        }
        out
    }
}

/// Squared distances between all rows of `[query; gallery]`.
pub fn pairwise_sq_distances(x: &Matrix) -> Matrix {
    let x = x.l2_normalized_rows();
    let mut d = matmul_bt(&x, &x).expect("square product");
    d.data_mut()
        .iter_mut()
        .for_each(|v| *v = (2.0 - 2.0 * *v).max(0.0));
    for i in 0..d.rows() {
        d.set(i, i, 0.0);
    }
    d
}

/// The `m` nearest indices of row `i`, ascending by distance with ties by index.
/// Includes the point itself.
fn nearest(dist: &Matrix, i: usize, m: usize) -> Vec<usize> {
    let row = dist.row(i);
    let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if m < idx.len() {
        idx.select_nth_unstable_by(m, cmp);
        idx.truncate(m);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Nearest-neighbor prefixes of every point, long enough for any `k1` up to `k_max`.
struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    fn new(dist: &Matrix, k_max: usize) -> Self {
        let n = dist.rows();
        let m = (k_max + 1).min(n);
        Self {
            lists: (0..n).map(|i| nearest(dist, i, m)).collect(),
        }
    }

    fn top(&self, i: usize, k: usize) -> &[usize] {
        let l = &self.lists[i];
        &l[..(k + 1).min(l.len())]
    }

    /// Members of the k-reciprocal set of `i`, in rank order.
    fn reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        self.top(i, k)
            .iter()
            .copied()
            .filter(|&j| self.top(j, k).contains(&i))
            .collect()
    }
}

/// Sparse row, sorted by column.
type Encoding = Vec<(usize, f64)>;

fn clamp_params(params: &RerankParams, n: usize) -> (usize, usize) {
    let mut k1 = params.k1;
    let mut k2 = params.k2;
    if n > 0 && k1 > n - 1 {
        log::warn!("k1={k1} exceeds {} neighbors, clamped", n - 1);
        k1 = n - 1;
    }
    if k2 > n.max(1) {
        log::warn!("k2={k2} exceeds {n} points, clamped");
        k2 = n.max(1);
    }
    (k1, k2)
}

fn encodings(dist: &Matrix, nb: &Neighborhoods, k1: usize, k2: usize) -> Vec<Encoding> {
    let n = dist.rows();
    let half = ((k1 as f64) / 2.0).round() as usize;
    let base: Vec<Vec<usize>> = (0..n).map(|i| nb.reciprocal(i, k1)).collect();
    let halves: Vec<Vec<usize>> = (0..n).map(|i| nb.reciprocal(i, half)).collect();
    let mut v: Vec<Encoding> = Vec::with_capacity(n);
    for (i, own) in base.iter().enumerate() {
        let mut expanded = own.clone();
        for &c in own {
            let cand = &halves[c];
            let common = cand.iter().filter(|j| own.contains(j)).count();
            if common as f64 > 2.0 / 3.0 * cand.len() as f64 {
                for &j in cand {
                    if !expanded.contains(&j) {
                        expanded.push(j);
                    }
                }
            }
        }
        expanded.sort_unstable();
        let total: f64 = expanded.iter().map(|&j| (-dist.get(i, j)).exp()).sum();
        v.push(
            expanded
                .into_iter()
                .map(|j| (j, (-dist.get(i, j)).exp() / total))
                .collect(),
        );
    }
    if k2 <= 1 {
        return v;
    }
    let mut acc = vec![0.0; n];
    let mut touched = vec![false; n];
    let mut cols = Vec::new();
    let averaged = (0..n)
        .map(|i| {
            for &j in nb.top(i, k2 - 1) {
                for &(c, w) in &v[j] {
                    if !touched[c] {
                        touched[c] = true;
                        cols.push(c);
                    }
                    acc[c] += w;
                }
            }
            cols.sort_unstable();
            let row: Encoding = cols.iter().map(|&c| (c, acc[c] / k2 as f64)).collect();
            for &c in &cols {
                acc[c] = 0.0;
                touched[c] = false;
            }
            cols.clear();
            row
        })
        .collect();
    averaged
}

/// Sum of `min(a, b)` over the shared support of two encodings.
fn overlap(a: &Encoding, b: &Encoding) -> f64 {
    let (mut x, mut y, mut s) = (0, 0, 0.0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                s += a[x].1.min(b[y].1);
                x += 1;
                y += 1;
            }
        }
    }
    s
}

fn check_square(dist: &Matrix, n_query: usize) -> Result<()> {
    let n = dist.rows();
    if dist.cols() != n || n_query > n {
        return Err(Error::Shape {
            op: "k_reciprocal_rerank",
            detail: format!("{}x{} distances for {n_query} queries", dist.rows(), dist.cols()),
        });
    }
    Ok(())
}

fn rerank_with(dist: &Matrix, nb: &Neighborhoods, n_query: usize, params: &RerankParams) -> Matrix {
    let n = dist.rows();
    let n_gallery = n - n_query;
    let mut out = Matrix::zeros(n_query, n_gallery);
    if params.lambda == 1.0 {
        for i in 0..n_query {
            for g in 0..n_gallery {
                out.set(i, g, dist.get(i, n_query + g));
            }
        }
        return out;
    }
    let (k1, k2) = clamp_params(params, n);
    let v = encodings(dist, nb, k1, k2);
    let mass: Vec<f64> = v.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    for i in 0..n_query {
        for g in 0..n_gallery {
            let j = n_query + g;
            let mn = overlap(&v[i], &v[j]);
            // sum of max = sum a + sum b - sum of min
            let mx = mass[i] + mass[j] - mn;
            let jac = if mx > 0.0 { 1.0 - mn / mx } else { 1.0 };
            out.set(i, g, params.lambda * dist.get(i, j) + (1.0 - params.lambda) * jac);
        }
    }
    out
}

/// Re-ranked distances from the first `n_query` points to the remaining ones,
/// given the full square distance matrix over `[query; gallery]`.
pub fn rerank_distances(dist: &Matrix, n_query: usize, params: &RerankParams) -> Result<Matrix> {
    params.validate()?;
    check_square(dist, n_query)?;
    let nb = Neighborhoods::new(dist, params.k1);
    Ok(rerank_with(dist, &nb, n_query, params))
}

/// Query-by-gallery re-ranked distances for raw feature rows.
pub fn k_reciprocal_rerank(query: &Matrix, gallery: &Matrix, params: &RerankParams) -> Result<Matrix> {
    let all = query.vstack(gallery)?;
    rerank_distances(&pairwise_sq_distances(&all), query.rows(), params)
}

fn ascending(d: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx
}

/// Re-ranks every query of `table` by k-reciprocal distance on appearance features.
pub fn evaluate_rerank(
    images: &[FeatureSet],
    table: &ComponentTable,
    params: &RerankParams,
    exec: Execution,
) -> Result<EvalReport> {
    let mut reports = search_rerank(images, table, std::slice::from_ref(params), exec)?;
    Ok(reports.remove(0))
}

/// One report per grid point, in grid order. Distances and neighbor lists of each
/// query are built once and shared by the whole grid.
pub fn search_rerank(
    images: &[FeatureSet],
    table: &ComponentTable,
    grid: &[RerankParams],
    exec: Execution,
) -> Result<Vec<EvalReport>> {
    for p in grid {
        p.validate()?;
    }
    let k_max = grid.iter().map(|p| p.k1).max().unwrap_or(0);
    let find = |id: u64| {
        images
            .iter()
            .find(|im| im.image_id == id)
            .ok_or(Error::UnknownImage(id))
    };
    let per_query: Vec<Result<Vec<Vec<bool>>>> = exec.map(&table.queries, |q| {
        let qim = find(q.query.image_id)?;
        let mut all = qim.features.select_rows(&[q.query.row]);
        for g in &q.groups {
            all = all.vstack(&find(g.image_id)?.features)?;
        }
        let dist = pairwise_sq_distances(&all);
        let nb = Neighborhoods::new(&dist, k_max);
        Ok(grid
            .iter()
            .map(|p| {
                let d = rerank_with(&dist, &nb, 1, p);
                ascending(d.row(0)).into_iter().map(|c| q.relevant[c]).collect()
            })
            .collect())
    });
    let per_query: Vec<Vec<Vec<bool>>> = per_query.into_iter().collect::<Result<_>>()?;
    grid.iter()
        .enumerate()
        .map(|(k, params)| {
            let rankings: Vec<Vec<bool>> = per_query.iter().map(|r| r[k].clone()).collect();
            let (metrics, per_query_ap) = metrics_from_rankings(&rankings)?;
            Ok(EvalReport {
                label: format!("k-reciprocal k1={} k2={} l={}", params.k1, params.k2, params.lambda),
                config: FusionConfig::baseline(),
                metrics,
                per_query_ap,
            })
        })
        .collect()
}
