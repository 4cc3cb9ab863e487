//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written with plain nested loops over `Vec<Vec<f64>>` and reads
//! parameters entry by entry, so it shares no arithmetic with the library's fast path.

#![allow(dead_code)]

use std::collections::BTreeSet;

use acae::head::{AcaeParams, FeatureSet, HeadConfig, Label};
use acae::tensor::{LayerNormParams, LinearMap, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.rows(), "row count");
    let mut worst: f64 = 0.0;
    for (i, r) in a.iter().enumerate() {
        assert_eq!(r.len(), b.cols(), "column count");
        for (j, v) in r.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

/// Output unit `o` of a linear map applied to `x`.
fn linear_unit(l: &LinearMap, o: usize, x: &[f64]) -> f64 {
    let mut s = match &l.bias {
        Some(b) => b[o],
        None => 0.0,
    };
    for (c, xv) in x.iter().enumerate() {
        s += l.weight.get(o, c) * xv;
    }
    s
}

fn linear(l: &LinearMap, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim()).map(|o| linear_unit(l, o, x)).collect()
}

pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let d = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    let mut out = Vec::with_capacity(x.len());
    for (k, v) in x.iter().enumerate() {
        out.push(p.gain[k] * (v - mean) / (var + p.epsilon).sqrt() + p.bias[k]);
    }
    out
}

pub struct AttentionMaps<'a> {
    pub query: &'a LinearMap,
    pub key: &'a LinearMap,
    pub value: &'a LinearMap,
    pub output: &'a LinearMap,
    pub ln: &'a LayerNormParams,
}

/// Per head: logits `e[i][j] = Q_h(x_i) . K_h(y_j)`, weights from a softmax over `j`,
/// context `sum_j w[i][j] V_h(y_j)`; heads are concatenated, projected, added to
/// `x_i` and layer-normalized. Returns outputs and per-head weights.
pub fn attention(
    xs: &Rows,
    ys: &Rows,
    maps: &AttentionMaps<'_>,
    heads: usize,
    scaled: bool,
) -> (Rows, Vec<Rows>) {
    let d = maps.output.out_dim();
    let dh = d / heads;
    let mut all_weights = vec![vec![vec![0.0; ys.len()]; xs.len()]; heads];
    let mut out = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let mut e = Vec::with_capacity(ys.len());
            for y in ys {
                let mut s = 0.0;
                for u in h * dh..(h + 1) * dh {
                    s += linear_unit(maps.query, u, x) * linear_unit(maps.key, u, y);
                }
                if scaled {
                    s /= (dh as f64).sqrt();
                }
                e.push(s);
            }
            let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - top).exp()).sum();
            for (j, y) in ys.iter().enumerate() {
                let w = (e[j] - top).exp() / z;
                all_weights[h][i][j] = w;
                for u in h * dh..(h + 1) * dh {
                    concat[u] += w * linear_unit(maps.value, u, y);
                }
            }
        }
        let projected = linear(maps.output, &concat);
        let pre: Vec<f64> = x.iter().zip(&projected).map(|(a, b)| a + b).collect();
        out.push(layer_norm(&pre, maps.ln));
    }
    (out, all_weights)
}

pub fn intra_maps(p: &AcaeParams) -> AttentionMaps<'_> {
    AttentionMaps {
        query: &p.intra.query,
        key: &p.intra.key,
        value: &p.intra.value,
        output: &p.intra.output,
        ln: &p.ln_intra,
    }
}

pub fn inter_maps(p: &AcaeParams) -> AttentionMaps<'_> {
    let qkv = if p.config.share_projections {
        &p.intra
    } else {
        &p.inter
    };
    AttentionMaps {
        query: &qkv.query,
        key: &qkv.key,
        value: &qkv.value,
        output: &p.inter.output,
        ln: &p.ln_inter,
    }
}

pub fn intra(x: &Rows, p: &AcaeParams) -> (Rows, Vec<Rows>) {
    attention(x, x, &intra_maps(p), p.config.heads, p.config.scaled_logits)
}

/// Empty gallery passes the intra features through untouched.
pub fn inter(intra: &Rows, gallery: &Rows, p: &AcaeParams) -> (Rows, Vec<Rows>) {
    if gallery.is_empty() {
        return (intra.clone(), vec![vec![Vec::new(); intra.len()]; p.config.heads]);
    }
    attention(intra, gallery, &inter_maps(p), p.config.heads, p.config.scaled_logits)
}

pub fn final_(x: &Rows, p: &AcaeParams) -> Rows {
    x.iter()
        .map(|r| {
            let hidden: Vec<f64> = linear(&p.mlp.hidden, r).into_iter().map(|v| v.max(0.0)).collect();
            let mlp = linear(&p.mlp.output, &hidden);
            let pre: Vec<f64> = r.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            layer_norm(&pre, &p.ln_final)
        })
        .collect()
}

pub struct SideOracle {
    pub intra: Rows,
    pub inter: Rows,
    pub final_: Rows,
    pub intra_weights: Vec<Rows>,
    pub inter_weights: Vec<Rows>,
}

pub fn pair(a: &Rows, b: &Rows, p: &AcaeParams) -> (SideOracle, SideOracle) {
    let (ia, wa) = intra(a, p);
    let (ib, wb) = intra(b, p);
    let (xa, va) = inter(&ia, b, p);
    let (xb, vb) = inter(&ib, a, p);
    let fa = final_(&xa, p);
    let fb = final_(&xb, p);
    (
        SideOracle {
            intra: ia,
            inter: xa,
            final_: fa,
            intra_weights: wa,
            inter_weights: va,
        },
        SideOracle {
            intra: ib,
            inter: xb,
            final_: fb,
            intra_weights: wb,
            inter_weights: vb,
        },
    )
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Seeded head with non-trivial biases and LN affine terms.
pub fn random_params(seed: u64, dim: usize, heads: usize) -> AcaeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AcaeParams::init(HeadConfig::new(dim).with_heads(heads), &mut rng).unwrap();
    for b in p.blocks_mut() {
        if b.name.ends_with(".bias") {
            b.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        } else if b.name.ends_with(".gain") {
            b.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
    }
    p
}

pub fn random_set(seed: u64, id: u64, n: usize, dim: usize) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<Label> = (0..n).map(|i| Some(i as u32)).collect();
    FeatureSet::new(id, Matrix::new(n, dim, data).unwrap(), labels).unwrap()
}

/// Brute-force k-reciprocal distances from rows `0..n_query` to the rest, written
/// with explicit neighbor sets.
pub fn k_reciprocal_oracle(dist: &Rows, n_query: usize, k1: usize, k2: usize, lambda: f64) -> Rows {
    let n = dist.len();
    let neighbors = |i: usize, k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap().then(a.cmp(&b)));
        idx.truncate(k + 1);
        idx
    };
    let reciprocal = |i: usize, k: usize| -> BTreeSet<usize> {
        neighbors(i, k)
            .into_iter()
            .filter(|&j| neighbors(j, k).contains(&i))
            .collect()
    };
    let half = (k1 as f64 / 2.0).round() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = reciprocal(i, k1);
        let mut expanded = r.clone();
        for &c in &r {
            let rc = reciprocal(c, half);
            let common = rc.intersection(&r).count();
            if 3 * common > 2 * rc.len() {
                expanded.extend(rc);
            }
        }
        let z: f64 = expanded.iter().map(|&j| (-dist[i][j]).exp()).sum();
        for &j in &expanded {
            v[i][j] = (-dist[i][j]).exp() / z;
        }
    }
    if k2 > 1 {
        let mut q = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut near = neighbors(i, k2);
            near.truncate(k2);
            for j in near {
                for c in 0..n {
                    q[i][c] += v[j][c] / k2 as f64;
                }
            }
        }
        v = q;
    }
    let mut out = vec![Vec::new(); n_query];
    for i in 0..n_query {
        for g in n_query..n {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for c in 0..n {
                lo += v[i][c].min(v[g][c]);
                hi += v[i][c].max(v[g][c]);
            }
            let jaccard = 1.0 - lo / hi;
            out[i].push(lambda * dist[i][g] + (1.0 - lambda) * jaccard);
        }
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// AP straight from the definition, as an exact fraction rounded once at the end.
/// Exact for lists up to 20 long (every numerator and denominator stays below 2^53).
pub fn ap_oracle(flags: &[bool]) -> Option<f64> {
    assert!(flags.len() <= 20);
    let (mut num, mut den) = (0u64, 1u64);
    let mut hits = 0u64;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            let k = k as u64 + 1;
            // num/den + hits/k
            num = num * k + hits * den;
            den *= k;
            let g = gcd(num, den);
            num /= g;
            den /= g;
        }
    }
    if hits == 0 {
        return None;
    }
    den *= hits;
    let g = gcd(num, den);
    Some((num / g) as f64 / (den / g) as f64)
}
