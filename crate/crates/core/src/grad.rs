//! Hand-derived reverse-mode gradients for the head and the OIM objective, and a
//! central-difference checker that validates them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::exec::Execution;
use crate::head::{
    acae_forward, AcaeParams, AttentionView, BlockCache, FeatureSet, FinalCache, HeadConfig,
    PairOutput, SideCache,
};
use crate::oim::{oim_loss, OimState, OimUpdate};
use crate::tensor::{
    dot, layer_norm_rows_backward, softmax_rows_backward, LayerNormParams, LinearMap, Matrix,
};

/// Gradient of a scalar loss wrt every parameter block and both images' input features.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: AcaeParams,
    pub features_a: Matrix,
    pub features_b: Matrix,
}

impl Gradients {
    pub fn zeros(config: HeadConfig, n: usize, m: usize) -> Self {
        Self {
            params: AcaeParams::zeros(config),
            features_a: Matrix::zeros(n, config.dim),
            features_b: Matrix::zeros(m, config.dim),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.features_a.is_finite() && self.features_b.is_finite()
    }
}

/// Upstream gradients on one side's embeddings. `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingGrads {
    pub intra: Option<Matrix>,
    pub inter: Option<Matrix>,
    pub final_: Option<Matrix>,
}

struct AttentionGrads<'a> {
    query: &'a mut LinearMap,
    key: &'a mut LinearMap,
    value: &'a mut LinearMap,
    output: &'a mut LinearMap,
    ln: &'a mut LayerNormParams,
}

/// Backpropagates through one attention block; returns `(d xq, d xkv)`.
fn attention_backward(
    cache: &BlockCache,
    view: AttentionView<'_>,
    grads: AttentionGrads<'_>,
    dout: &Matrix,
    cfg: &HeadConfig,
) -> Result<(Matrix, Matrix)> {
    if cache.passthrough {
        return Ok((dout.clone(), Matrix::zeros(0, cfg.dim)));
    }
    let n = cache.xq.rows();
    let m = cache.xkv.rows();
    let dh = cfg.head_dim();
    let scale = if cfg.scaled_logits {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    };
    let dpre = layer_norm_rows_backward(&cache.ln, dout, view.ln, grads.ln);
    let mut dxq = dpre.clone();
    let dctx = view.output.backward(&cache.ctx, &dpre, grads.output)?;
    let mut dq = Matrix::zeros(n, cfg.dim);
    let mut dk = Matrix::zeros(m, cfg.dim);
    let mut dv = Matrix::zeros(m, cfg.dim);
    for (h, w) in cache.weights.iter().enumerate() {
        let off = h * dh;
        let mut dw = Matrix::zeros(n, m);
        for i in 0..n {
            let dci = &dctx.row(i)[off..off + dh];
            for j in 0..m {
                dw.set(i, j, dot(dci, &cache.v.row(j)[off..off + dh]));
                let wij = w.get(i, j);
                for (g, c) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dci) {
                    *g += wij * c;
                }
            }
        }
        let de = softmax_rows_backward(w, &dw);
        for i in 0..n {
            for j in 0..m {
                let e = scale * de.get(i, j);
                if e == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[off..off + dh];
                for (g, kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                    *g += e * kv;
                }
                let qi = &cache.q.row(i)[off..off + dh];
                for (g, qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                    *g += e * qv;
                }
            }
        }
    }
    dxq.add_assign(&view.query.backward(&cache.xq, &dq, grads.query)?)?;
    let mut dxkv = view.key.backward(&cache.xkv, &dk, grads.key)?;
    dxkv.add_assign(&view.value.backward(&cache.xkv, &dv, grads.value)?)?;
    Ok((dxq, dxkv))
}

fn final_backward(
    cache: &FinalCache,
    params: &AcaeParams,
    grads: &mut AcaeParams,
    dout: &Matrix,
) -> Result<Matrix> {
    let dpre = layer_norm_rows_backward(&cache.ln, dout, &params.ln_final, &mut grads.ln_final);
    let mut dx = dpre.clone();
    let mut dhidden = params
        .mlp
        .output
        .backward(&cache.hidden, &dpre, &mut grads.mlp.output)?;
    for (g, pre) in dhidden.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    dx.add_assign(&params.mlp.hidden.backward(&cache.x, &dhidden, &mut grads.mlp.hidden)?)?;
    Ok(dx)
}

fn intra_grads(g: &mut AcaeParams) -> AttentionGrads<'_> {
    AttentionGrads {
        query: &mut g.intra.query,
        key: &mut g.intra.key,
        value: &mut g.intra.value,
        output: &mut g.intra.output,
        ln: &mut g.ln_intra,
    }
}

fn inter_grads(g: &mut AcaeParams, shared: bool) -> AttentionGrads<'_> {
    let AcaeParams {
        intra,
        inter,
        ln_inter,
        ..
    } = g;
    let crate::head::AttentionParams {
        query,
        key,
        value,
        output,
    } = inter;
    if shared {
        AttentionGrads {
            query: &mut intra.query,
            key: &mut intra.key,
            value: &mut intra.value,
            output,
            ln: ln_inter,
        }
    } else {
        AttentionGrads {
            query,
            key,
            value,
            output,
            ln: ln_inter,
        }
    }
}

fn add_opt(acc: &mut Matrix, g: &Option<Matrix>, what: &'static str) -> Result<()> {
    if let Some(g) = g {
        if g.shape() != acc.shape() {
            return Err(shape(
                what,
                format!("upstream {:?} vs embedding {:?}", g.shape(), acc.shape()),
            ));
        }
        acc.add_assign(g)?;
    }
    Ok(())
}

/// Propagates one side back to (d raw own features, d raw other features).
fn side_backward(
    side: &SideCache,
    up: &EmbeddingGrads,
    params: &AcaeParams,
    grads: &mut AcaeParams,
) -> Result<(Matrix, Matrix)> {
    let cfg = params.config;
    let n = side.intra.xq.rows();
    let mut d_inter = match &up.final_ {
        Some(g) => {
            if g.shape() != (n, cfg.dim) {
                return Err(shape("backward", "final upstream shape"));
            }
            final_backward(&side.final_, params, grads, g)?
        }
        None => Matrix::zeros(n, cfg.dim),
    };
    add_opt(&mut d_inter, &up.inter, "backward")?;
    let (mut d_intra, d_other) = attention_backward(
        &side.inter,
        params.inter_view(),
        inter_grads(grads, cfg.share_projections),
        &d_inter,
        &cfg,
    )?;
    add_opt(&mut d_intra, &up.intra, "backward")?;
    let (mut d_own, d_own_kv) = attention_backward(
        &side.intra,
        params.intra_view(),
        intra_grads(grads),
        &d_intra,
        &cfg,
    )?;
    d_own.add_assign(&d_own_kv)?;
    Ok((d_own, d_other))
}

/// Reverse pass over a recorded [`PairOutput`] given upstream gradients on the embeddings.
pub fn backward(
    params: &AcaeParams,
    out: &PairOutput,
    up_a: &EmbeddingGrads,
    up_b: &EmbeddingGrads,
) -> Result<Gradients> {
    let n = out.a.intra.rows();
    let m = out.b.intra.rows();
    let mut g = Gradients::zeros(params.config, n, m);
    let (da, db_from_a) = side_backward(&out.cache_a, up_a, params, &mut g.params)?;
    let (db, da_from_b) = side_backward(&out.cache_b, up_b, params, &mut g.params)?;
    g.features_a = da;
    g.features_b = db;
    if db_from_a.rows() > 0 {
        g.features_b.add_assign(&db_from_a)?;
    }
    if da_from_b.rows() > 0 {
        g.features_a.add_assign(&da_from_b)?;
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("backward"));
    }
    Ok(g)
}

/// Gradient through `y = x / |x|` row by row, given the normalized rows `y`.
fn l2_normalize_backward(x: &Matrix, y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = crate::tensor::norm(x.row(r));
        if n == 0.0 {
            continue;
        }
        let yr = y.row(r);
        let dyr = dy.row(r);
        let proj = dot(yr, dyr);
        for ((o, yv), dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = (dv - yv * proj) / n;
        }
    }
    dx
}

/// Which embeddings receive OIM supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supervision {
    pub intra: bool,
    pub inter: bool,
    pub final_: bool,
}

impl Default for Supervision {
    fn default() -> Self {
        Self {
            intra: false,
            inter: false,
            final_: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// Lookup/queue update from image A's normalized final embeddings.
    pub update: OimUpdate,
    pub labeled: usize,
}

/// `weight * OIM` over the L2-normalized embeddings of both images, one term per
/// supervised embedding kind, with exact gradients.
pub fn pair_loss(
    params: &AcaeParams,
    a: &FeatureSet,
    b: &FeatureSet,
    oim: &OimState,
    supervision: Supervision,
    weight: f64,
) -> Result<PairLoss> {
    let out = acae_forward(a, b, params)?;
    let labels: Vec<_> = a.labels.iter().chain(&b.labels).copied().collect();
    let n = a.len();
    let mut up_a = EmbeddingGrads::default();
    let mut up_b = EmbeddingGrads::default();
    let mut loss = 0.0;
    let mut labeled = 0;
    let kinds: [(bool, fn(&crate::head::ContextualEmbeddings) -> &Matrix, usize); 3] = [
        (supervision.intra, |e| &e.intra, 0),
        (supervision.inter, |e| &e.inter, 1),
        (supervision.final_, |e| &e.final_, 2),
    ];
    for (on, pick, slot) in kinds {
        if !on {
            continue;
        }
        let raw = pick(&out.a).vstack(pick(&out.b))?;
        let normed = raw.l2_normalized_rows();
        let o = oim_loss(&normed, &labels, oim)?;
        loss += weight * o.loss;
        labeled = o.labeled;
        let mut dnormed = o.grad;
        dnormed.scale(weight);
        let draw = l2_normalize_backward(&raw, &normed, &dnormed);
        let da = draw.select_rows(&(0..n).collect::<Vec<_>>());
        let db = draw.select_rows(&(n..raw.rows()).collect::<Vec<_>>());
        let (sa, sb) = match slot {
            0 => (&mut up_a.intra, &mut up_b.intra),
            1 => (&mut up_a.inter, &mut up_b.inter),
            _ => (&mut up_a.final_, &mut up_b.final_),
        };
        *sa = Some(da);
        *sb = Some(db);
    }
    let grads = backward(params, &out, &up_a, &up_b)?;
    let own = out.a.final_.l2_normalized_rows();
    let update = oim_loss(&own, &a.labels, oim)?.update;
    Ok(PairLoss {
        loss,
        grads,
        update,
        labeled,
    })
}

/// Loss value only, for finite differences.
pub fn pair_loss_value(
    params: &AcaeParams,
    a: &FeatureSet,
    b: &FeatureSet,
    oim: &OimState,
    supervision: Supervision,
    weight: f64,
) -> Result<f64> {
    let out = acae_forward(a, b, params)?;
    let labels: Vec<_> = a.labels.iter().chain(&b.labels).copied().collect();
    let mut loss = 0.0;
    for (on, m_a, m_b) in [
        (supervision.intra, &out.a.intra, &out.b.intra),
        (supervision.inter, &out.a.inter, &out.b.inter),
        (supervision.final_, &out.a.final_, &out.b.final_),
    ] {
        if on {
            let normed = m_a.vstack(m_b)?.l2_normalized_rows();
            loss += weight * oim_loss(&normed, &labels, oim)?.loss;
        }
    }
    Ok(loss)
}

/// Loss scale of checker instances.
///
/// Central differences of an O(1) loss carry roughly `ulp(L) / 2h` of rounding noise,
/// about 4e-11 at `h = 1e-5`, which swamps the relative error of entries whose true
/// gradient sits just above the 1e-8 floor. Scaling the loss down moves those entries
/// under the floor; the gradients themselves are linear in the scale.
pub const GRADCHECK_WEIGHT: f64 = 1e-3;

/// A seeded pair of images with an OIM table, used by the gradient checker.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub params: AcaeParams,
    pub a: FeatureSet,
    pub b: FeatureSet,
    pub oim: OimState,
    pub supervision: Supervision,
    pub weight: f64,
}

impl GradCheckInstance {
    pub fn seeded(seed: u64, n: usize, m: usize, dim: usize, heads: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AcaeParams::init(HeadConfig::new(dim).with_heads(heads), &mut rng)?;
        let identities = 4;
        let mut oim = OimState::random(identities, dim, &mut rng).with_capacity(3);
        oim.temperature = 0.5;
        for _ in 0..2 {
            let v = Matrix::uniform(1, dim, 1.0, &mut rng).l2_normalized_rows();
            oim.push_unlabeled(v.row(0));
        }
        let image = |id: u64, rows: usize, rng: &mut ChaCha8Rng| {
            let features = Matrix::uniform(rows, dim, 1.0, rng);
            let labels = (0..rows)
                .map(|_| {
                    if rng.gen_bool(0.8) {
                        Some(rng.gen_range(0..identities as u32))
                    } else {
                        None
                    }
                })
                .collect();
            FeatureSet::new(id, features, labels)
        };
        let a = image(0, n, &mut rng)?;
        let b = image(1, m, &mut rng)?;
        Ok(Self {
            params,
            a,
            b,
            oim,
            supervision: Supervision {
                intra: true,
                inter: true,
                final_: true,
            },
            weight: GRADCHECK_WEIGHT,
        })
    }

    pub fn loss(&self, params: &AcaeParams) -> Result<f64> {
        pair_loss_value(params, &self.a, &self.b, &self.oim, self.supervision, self.weight)
    }

    fn loss_with_features(&self, a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
        pair_loss_value(&self.params, a, b, &self.oim, self.supervision, self.weight)
    }

    pub fn analytic(&self) -> Result<Gradients> {
        Ok(pair_loss(
            &self.params,
            &self.a,
            &self.b,
            &self.oim,
            self.supervision,
            self.weight,
        )?
        .grads)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.pass)
    }
}

/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Compares backprop against central differences for every entry of every block.
pub fn grad_check(inst: &GradCheckInstance, tolerance: f64, step: f64) -> Result<GradCheckReport> {
    let analytic = inst.analytic()?;
    compare_gradients(inst, &analytic, tolerance, step)
}

/// Same as [`grad_check`] but against caller-supplied gradients.
pub fn compare_gradients(
    inst: &GradCheckInstance,
    analytic: &Gradients,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut blocks = Vec::new();
    let names: Vec<(String, usize)> = inst
        .params
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.data.len()))
        .collect();
    let ana_blocks = analytic.params.blocks();
    for (bi, (name, len)) in names.iter().enumerate() {
        let mut worst = (0.0, 0);
        for idx in 0..*len {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = inst.params.clone();
                p.blocks_mut()[bi].data[idx] += delta;
                inst.loss(&p)
            };
            let fd = (probe(step)? - probe(-step)?) / (2.0 * step);
            let r = relative_error(ana_blocks[bi].data[idx], fd);
            if r > worst.0 || !r.is_finite() {
                worst = (r, idx);
            }
        }
        blocks.push(block_report(name.clone(), worst, tolerance));
    }
    for (name, which) in [("features.a", 0), ("features.b", 1)] {
        let base = if which == 0 { &inst.a } else { &inst.b };
        let ana = if which == 0 {
            &analytic.features_a
        } else {
            &analytic.features_b
        };
        let mut worst = (0.0, 0);
        for idx in 0..base.features.data().len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut moved = base.clone();
                moved.features.data_mut()[idx] += delta;
                if which == 0 {
                    inst.loss_with_features(&moved, &inst.b)
                } else {
                    inst.loss_with_features(&inst.a, &moved)
                }
            };
            let fd = (probe(step)? - probe(-step)?) / (2.0 * step);
            let r = relative_error(ana.data()[idx], fd);
            if r > worst.0 || !r.is_finite() {
                worst = (r, idx);
            }
        }
        blocks.push(block_report(name.to_string(), worst, tolerance));
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradCheckReport {
        tolerance,
        blocks,
        pass,
    })
}

fn block_report(name: String, worst: (f64, usize), tolerance: f64) -> BlockReport {
    BlockReport {
        name,
        max_rel_error: worst.0,
        worst_index: worst.1,
        pass: worst.0 < tolerance,
    }
}

/// Runs the checker over the standard sweep of shapes, `count` instances in total.
///
/// Shapes cycle through `n, m in {1, 2, 5}` and `heads in {1, 2}` at `dim = 8`.
pub fn grad_check_suite(
    seed: u64,
    count: usize,
    tolerance: f64,
    step: f64,
    exec: Execution,
) -> Result<Vec<GradCheckReport>> {
    let sizes = [1usize, 2, 5];
    let shapes: Vec<(usize, usize, usize)> = (0..count)
        .map(|i| {
            let n = sizes[i % 3];
            let m = sizes[(i / 3) % 3];
            let h = 1 + (i / 9) % 2;
            (n, m, h)
        })
        .collect();
    exec.map_range(count, |i| {
        let (n, m, h) = shapes[i];
        let inst = GradCheckInstance::seeded(seed.wrapping_add(i as u64), n, m, 8, h)?;
        grad_check(&inst, tolerance, step)
    })
    .into_iter()
    .collect()
}

/// Merges per-instance reports into one row per block holding the worst error seen.
pub fn merge_reports(reports: &[GradCheckReport]) -> GradCheckReport {
    let tolerance = reports.first().map(|r| r.tolerance).unwrap_or(DEFAULT_TOLERANCE);
    let mut blocks: Vec<BlockReport> = Vec::new();
    for r in reports {
        for b in &r.blocks {
            match blocks.iter_mut().find(|x| x.name == b.name) {
                Some(x) if b.max_rel_error > x.max_rel_error => *x = b.clone(),
                Some(_) => {}
                None => blocks.push(b.clone()),
            }
        }
    }
    let pass = blocks.iter().all(|b| b.pass);
    GradCheckReport {
        tolerance,
        blocks,
        pass,
    }
}
