//! The attention context-aware embedding head.
//!
//! For a pair of images `A`, `B` with appearance features `p_i` and `q_j`:
//!
//! * intra-image attention: `p̄_i = LN(p_i + Σ_j w_ij V(p_j))` over every node of `A`,
//!   self included;
//! * inter-image attention: `p̂_i = LN(p̄_i + Σ_j w'_ij V(q_j))`, queries from `p̄`,
//!   keys and values from the raw features of `B`;
//! * final transform: `p̃_i = LN(p̂_i + MLP(p̂_i))`.
//!
//! The same parameters process `B` against `A`. Attention is multi-head: the
//! `d x d` projection matrices are split into `heads` row blocks of `d / heads`
//! rows, one per head, and the concatenated head outputs go through an output
//! projection before the residual add.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::tensor::{
    dot, layer_norm_rows, softmax_in_place, LayerNormCache, LayerNormParams,
    LinearMap, Matrix, DEFAULT_LN_EPS,
};

/// Identity label of one detected person. `None` marks an unlabeled person.
pub type Label = Option<u32>;

/// One image's person instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub image_id: u64,
    pub features: Matrix,
    pub labels: Vec<Label>,
}

impl FeatureSet {
    pub fn new(image_id: u64, features: Matrix, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(shape(
                "FeatureSet::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("FeatureSet"));
        }
        Ok(Self {
            image_id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labeled_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels.iter().filter_map(|l| *l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Divide attention logits by `sqrt(d / heads)`. Off by default: plain dot products.
    pub scaled_logits: bool,
    /// Reuse the intra-image query/key/value projections in the inter-image block.
    pub share_projections: bool,
    pub ln_eps: f64,
}

impl HeadConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 4,
            ff_dim: 2 * dim,
            scaled_logits: false,
            share_projections: false,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("dim, heads and ff_dim must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layer norm epsilon must be positive".into()));
        }
        Ok(())
    }

    fn logit_scale(&self) -> f64 {
        if self.scaled_logits {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub output: LinearMap,
}

impl AttentionParams {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            query: LinearMap::init(d, d, rng),
            key: unbiased(LinearMap::init(d, d, rng)),
            value: LinearMap::init(d, d, rng),
            output: LinearMap::init(d, d, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            query: LinearMap::zeros(d, d),
            key: unbiased(LinearMap::zeros(d, d)),
            value: LinearMap::zeros(d, d),
            output: LinearMap::zeros(d, d),
        }
    }
}

/// A key bias adds the same amount to every logit of a softmax row, so it can
/// never change an output; key projections are bias-free.
fn unbiased(mut l: LinearMap) -> LinearMap {
    l.bias = None;
    l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: LinearMap,
    pub output: LinearMap,
}

/// All learnable weights of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcaeParams {
    pub config: HeadConfig,
    pub intra: AttentionParams,
    pub inter: AttentionParams,
    pub mlp: MlpParams,
    pub ln_intra: LayerNormParams,
    pub ln_inter: LayerNormParams,
    pub ln_final: LayerNormParams,
}

/// Named view of one parameter tensor. Bias and gain vectors are `1 x n`.
pub struct ParamBlock<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub struct ParamBlockMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

impl AcaeParams {
    /// Fan-in scaled uniform projections, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(Self {
            config,
            intra: AttentionParams::init(d, rng),
            inter: AttentionParams::init(d, rng),
            mlp: MlpParams {
                hidden: LinearMap::init(config.ff_dim, d, rng),
                output: LinearMap::init(d, config.ff_dim, rng),
            },
            ln_intra: LayerNormParams::new(d, config.ln_eps),
            ln_inter: LayerNormParams::new(d, config.ln_eps),
            ln_final: LayerNormParams::new(d, config.ln_eps),
        })
    }

    /// Every weight, bias, gain and layer-norm bias set to zero. Used as a gradient accumulator.
    pub fn zeros(config: HeadConfig) -> Self {
        let d = config.dim;
        let zero_ln = || LayerNormParams {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
            epsilon: config.ln_eps,
        };
        Self {
            config,
            intra: AttentionParams::zeros(d),
            inter: AttentionParams::zeros(d),
            mlp: MlpParams {
                hidden: LinearMap::zeros(config.ff_dim, d),
                output: LinearMap::zeros(d, config.ff_dim),
            },
            ln_intra: zero_ln(),
            ln_inter: zero_ln(),
            ln_final: zero_ln(),
        }
    }

    /// Zeroes the value, output-projection and MLP weights and biases, so that every
    /// residual branch contributes nothing.
    pub fn zero_value_paths(&mut self) {
        for block in [&mut self.intra, &mut self.inter] {
            block.value = LinearMap::zeros(self.config.dim, self.config.dim);
            block.output = LinearMap::zeros(self.config.dim, self.config.dim);
        }
        self.mlp.hidden = LinearMap::zeros(self.config.ff_dim, self.config.dim);
        self.mlp.output = LinearMap::zeros(self.config.dim, self.config.ff_dim);
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (block, p) in [("intra", &self.intra), ("inter", &self.inter)] {
            for (name, l) in [
                ("query", &p.query),
                ("key", &p.key),
                ("value", &p.value),
                ("output", &p.output),
            ] {
                push_linear(&mut out, &format!("{block}.{name}"), l);
            }
        }
        push_linear(&mut out, "mlp.hidden", &self.mlp.hidden);
        push_linear(&mut out, "mlp.output", &self.mlp.output);
        for (name, ln) in [
            ("ln_intra", &self.ln_intra),
            ("ln_inter", &self.ln_inter),
            ("ln_final", &self.ln_final),
        ] {
            out.push(ParamBlock {
                name: format!("{name}.gain"),
                rows: 1,
                cols: ln.gain.len(),
                data: &ln.gain,
            });
            out.push(ParamBlock {
                name: format!("{name}.bias"),
                rows: 1,
                cols: ln.bias.len(),
                data: &ln.bias,
            });
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = Vec::new();
        for (block, p) in [("intra", &mut self.intra), ("inter", &mut self.inter)] {
            let AttentionParams {
                query,
                key,
                value,
                output,
            } = p;
            for (name, l) in [
                ("query", query),
                ("key", key),
                ("value", value),
                ("output", output),
            ] {
                push_linear_mut(&mut out, &format!("{block}.{name}"), l);
            }
        }
        push_linear_mut(&mut out, "mlp.hidden", &mut self.mlp.hidden);
        push_linear_mut(&mut out, "mlp.output", &mut self.mlp.output);
        for (name, ln) in [
            ("ln_intra", &mut self.ln_intra),
            ("ln_inter", &mut self.ln_inter),
            ("ln_final", &mut self.ln_final),
        ] {
            let LayerNormParams { gain, bias, .. } = ln;
            let cols = gain.len();
            out.push(ParamBlockMut {
                name: format!("{name}.gain"),
                rows: 1,
                cols,
                data: gain,
            });
            out.push(ParamBlockMut {
                name: format!("{name}.bias"),
                rows: 1,
                cols,
                data: bias,
            });
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// `self += k * other`, block by block.
    pub fn axpy(&mut self, k: f64, other: &AcaeParams) {
        let src = other.blocks();
        for (dst, s) in self.blocks_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(s.data) {
                *a += k * b;
            }
        }
    }

    pub(crate) fn intra_view(&self) -> AttentionView<'_> {
        AttentionView {
            query: &self.intra.query,
            key: &self.intra.key,
            value: &self.intra.value,
            output: &self.intra.output,
            ln: &self.ln_intra,
        }
    }

    pub(crate) fn inter_view(&self) -> AttentionView<'_> {
        let qkv = if self.config.share_projections {
            &self.intra
        } else {
            &self.inter
        };
        AttentionView {
            query: &qkv.query,
            key: &qkv.key,
            value: &qkv.value,
            output: &self.inter.output,
            ln: &self.ln_inter,
        }
    }
}

fn push_linear<'a>(out: &mut Vec<ParamBlock<'a>>, prefix: &str, l: &'a LinearMap) {
    out.push(ParamBlock {
        name: format!("{prefix}.weight"),
        rows: l.weight.rows(),
        cols: l.weight.cols(),
        data: l.weight.data(),
    });
    if let Some(b) = &l.bias {
        out.push(ParamBlock {
            name: format!("{prefix}.bias"),
            rows: 1,
            cols: b.len(),
            data: b,
        });
    }
}

fn push_linear_mut<'a>(out: &mut Vec<ParamBlockMut<'a>>, prefix: &str, l: &'a mut LinearMap) {
    let LinearMap { weight, bias } = l;
    let (rows, cols) = weight.shape();
    out.push(ParamBlockMut {
        name: format!("{prefix}.weight"),
        rows,
        cols,
        data: weight.data_mut(),
    });
    if let Some(b) = bias {
        let cols = b.len();
        out.push(ParamBlockMut {
            name: format!("{prefix}.bias"),
            rows: 1,
            cols,
            data: b,
        });
    }
}

/// The maps one attention block actually uses (projections may be shared).
#[derive(Clone, Copy)]
pub(crate) struct AttentionView<'a> {
    pub query: &'a LinearMap,
    pub key: &'a LinearMap,
    pub value: &'a LinearMap,
    pub output: &'a LinearMap,
    pub ln: &'a LayerNormParams,
}

/// Per-node embedding triplet for one image of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbeddings {
    pub intra: Matrix,
    pub inter: Matrix,
    pub final_: Matrix,
    /// Set when the other image had no persons and `inter` is a copy of `intra`.
    pub inter_passthrough: bool,
}

/// Logits and softmax weights of one attention block, one matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub logits: Vec<Matrix>,
    pub weights: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct PairTraces {
    pub intra_a: AttentionTrace,
    pub intra_b: AttentionTrace,
    pub inter_a: AttentionTrace,
    pub inter_b: AttentionTrace,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    pub xq: Matrix,
    pub xkv: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub weights: Vec<Matrix>,
    pub ctx: Matrix,
    pub ln: LayerNormCache,
    pub passthrough: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct FinalCache {
    pub x: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub ln: LayerNormCache,
}

/// Everything the backward pass needs from one image's side of a pair.
#[derive(Clone, Debug)]
pub(crate) struct SideCache {
    pub intra: BlockCache,
    pub inter: BlockCache,
    pub final_: FinalCache,
}

/// Output of [`acae_forward`].
#[derive(Clone, Debug)]
pub struct PairOutput {
    pub a: ContextualEmbeddings,
    pub b: ContextualEmbeddings,
    pub traces: PairTraces,
    pub(crate) cache_a: SideCache,
    pub(crate) cache_b: SideCache,
}

fn check_dim(m: &Matrix, cfg: &HeadConfig, what: &'static str) -> Result<()> {
    if m.cols() != cfg.dim {
        return Err(shape(
            what,
            format!("feature dim {} vs head dim {}", m.cols(), cfg.dim),
        ));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Shared attention block: `LN(xq + Wo·concat_h(softmax(Q_h K_hᵀ) V_h) + bo)`.
pub(crate) fn attention_block(
    xq: &Matrix,
    xkv: &Matrix,
    view: AttentionView<'_>,
    cfg: &HeadConfig,
) -> Result<(Matrix, AttentionTrace, BlockCache)> {
    let (n, m) = (xq.rows(), xkv.rows());
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let scale = cfg.logit_scale();
    let q = view.query.forward(xq)?;
    let k = view.key.forward(xkv)?;
    let v = view.value.forward(xkv)?;
    let mut ctx = Matrix::zeros(n, d);
    let mut logits = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let off = h * dh;
        let mut e = Matrix::zeros(n, m);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            for j in 0..m {
                let kj = &k.row(j)[off..off + dh];
                e.set(i, j, scale * dot(qi, kj));
            }
        }
        let mut w = e.clone();
        for i in 0..n {
            softmax_in_place(w.row_mut(i));
        }
        for i in 0..n {
            let wi = w.row(i);
            let out = &mut ctx.row_mut(i)[off..off + dh];
            for (j, &wij) in wi.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *o += wij * vv;
                }
            }
        }
        logits.push(e);
        weights.push(w);
    }
    let attended = view.output.forward(&ctx)?;
    let mut pre = xq.clone();
    pre.add_assign(&attended)?;
    let (out, ln) = layer_norm_rows(&pre, view.ln)?;
    let trace = AttentionTrace {
        logits,
        weights: weights.clone(),
    };
    let cache = BlockCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        weights,
        ctx,
        ln,
        passthrough: false,
    };
    Ok((out, trace, cache))
}

fn passthrough_block(xq: &Matrix, cfg: &HeadConfig) -> (Matrix, AttentionTrace, BlockCache) {
    let n = xq.rows();
    let empty = || Matrix::zeros(0, cfg.dim);
    let trace = AttentionTrace {
        logits: vec![Matrix::zeros(n, 0); cfg.heads],
        weights: vec![Matrix::zeros(n, 0); cfg.heads],
    };
    let cache = BlockCache {
        xq: xq.clone(),
        xkv: empty(),
        q: empty(),
        k: empty(),
        v: empty(),
        weights: trace.weights.clone(),
        ctx: Matrix::zeros(n, cfg.dim),
        ln: LayerNormCache {
            normalized: Matrix::zeros(0, cfg.dim),
            inv_std: Vec::new(),
        },
        passthrough: true,
    };
    (xq.clone(), trace, cache)
}

/// Intra-image attention over all persons of one image (self edge included).
pub fn intra_attention(feats: &FeatureSet, params: &AcaeParams) -> Result<(Matrix, AttentionTrace)> {
    let (out, trace, _) = intra_block(&feats.features, params)?;
    Ok((out, trace))
}

pub(crate) fn intra_block(
    x: &Matrix,
    params: &AcaeParams,
) -> Result<(Matrix, AttentionTrace, BlockCache)> {
    check_dim(x, &params.config, "intra_attention")?;
    attention_block(x, x, params.intra_view(), &params.config)
}

/// Inter-image attention: rows of `intra` query the raw features of `gallery`.
///
/// An empty gallery leaves `intra` unchanged; the returned flag reports that case.
pub fn inter_attention(
    intra: &Matrix,
    gallery: &FeatureSet,
    params: &AcaeParams,
) -> Result<(Matrix, AttentionTrace, bool)> {
    let (out, trace, cache) = inter_block(intra, &gallery.features, params)?;
    Ok((out, trace, cache.passthrough))
}

pub(crate) fn inter_block(
    intra: &Matrix,
    gallery: &Matrix,
    params: &AcaeParams,
) -> Result<(Matrix, AttentionTrace, BlockCache)> {
    check_dim(intra, &params.config, "inter_attention")?;
    check_dim(gallery, &params.config, "inter_attention")?;
    if gallery.rows() == 0 {
        return Ok(passthrough_block(intra, &params.config));
    }
    attention_block(intra, gallery, params.inter_view(), &params.config)
}

/// `LN(x + W2 relu(W1 x + b1) + b2)` row by row.
pub fn final_transform(inter: &Matrix, params: &AcaeParams) -> Result<Matrix> {
    Ok(final_block(inter, params)?.0)
}

pub(crate) fn final_block(x: &Matrix, params: &AcaeParams) -> Result<(Matrix, FinalCache)> {
    check_dim(x, &params.config, "final_transform")?;
    let hidden_pre = params.mlp.hidden.forward(x)?;
    let mut hidden = hidden_pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mlp = params.mlp.output.forward(&hidden)?;
    let mut pre = x.clone();
    pre.add_assign(&mlp)?;
    let (out, ln) = layer_norm_rows(&pre, &params.ln_final)?;
    Ok((
        out,
        FinalCache {
            x: x.clone(),
            hidden_pre,
            hidden,
            ln,
        },
    ))
}

/// Intra-image pass for one image, reusable across every pair that image takes part in.
#[derive(Clone, Debug)]
pub struct IntraOutput {
    pub features: Matrix,
    pub intra: Matrix,
    pub trace: AttentionTrace,
    pub(crate) cache: BlockCache,
}

pub fn prepare(features: &Matrix, params: &AcaeParams) -> Result<IntraOutput> {
    let (intra, trace, cache) = intra_block(features, params)?;
    Ok(IntraOutput {
        features: features.clone(),
        intra,
        trace,
        cache,
    })
}

/// Inter and final passes in both directions from already prepared images.
pub fn pair_forward(a: &IntraOutput, b: &IntraOutput, params: &AcaeParams) -> Result<PairOutput> {
    let (inter_a, trace_a, cache_inter_a) = inter_block(&a.intra, &b.features, params)?;
    let (inter_b, trace_b, cache_inter_b) = inter_block(&b.intra, &a.features, params)?;
    let (final_a, cache_final_a) = final_block(&inter_a, params)?;
    let (final_b, cache_final_b) = final_block(&inter_b, params)?;
    Ok(PairOutput {
        a: ContextualEmbeddings {
            intra: a.intra.clone(),
            inter: inter_a,
            final_: final_a,
            inter_passthrough: cache_inter_a.passthrough,
        },
        b: ContextualEmbeddings {
            intra: b.intra.clone(),
            inter: inter_b,
            final_: final_b,
            inter_passthrough: cache_inter_b.passthrough,
        },
        traces: PairTraces {
            intra_a: a.trace.clone(),
            intra_b: b.trace.clone(),
            inter_a: trace_a,
            inter_b: trace_b,
        },
        cache_a: SideCache {
            intra: a.cache.clone(),
            inter: cache_inter_a,
            final_: cache_final_a,
        },
        cache_b: SideCache {
            intra: b.cache.clone(),
            inter: cache_inter_b,
            final_: cache_final_b,
        },
    })
}

/// Full symmetric forward pass for an image pair with shared parameters.
pub fn acae_forward(a: &FeatureSet, b: &FeatureSet, params: &AcaeParams) -> Result<PairOutput> {
    let pa = prepare(&a.features, params)?;
    let pb = prepare(&b.features, params)?;
    pair_forward(&pa, &pb, params)
}
