//! The four CTR heads on a shared ReLU MLP, with hand-written backward passes.
//!
//! Every model reads one embedding column per categorical field. The deep
//! stream sees `[embeddings, dense features]`; the wide or cross stream sees
//! the embeddings (or the ids) only. The logit is the sum of the streams:
//!
//! * W&D: `w₀ + Σ_j w[id_j]` plus the MLP output.
//! * DeepFM: the W&D sum plus `½(‖Σ_j v_j‖² − Σ_j ‖v_j‖²)`.
//! * DCN: cross layers `x_{l+1} = x₀ (x_l·w_l) + b_l + x_l` on `x₀` = the
//!   concatenated embeddings, projected to a scalar, plus the MLP output.
//! * DCNv2: as DCN with `x_{l+1} = x₀ ⊙ (W_l x_l + b_l) + x_l`.
//!
//! The per-id wide weights `w[id]` live in a one-dimensional
//! [`EmbeddingTable`] so they get the same sparse treatment as embeddings.
//! They are never clipped.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Schema};
use crate::embedding::{accumulate_gradients, lookup_ids, EmbeddingTable, FieldGradient, LookupRecord, SparseGradient};
use crate::error::{Error, Result};
use crate::linalg::{dot, gemm_ab, gemm_abt, gemm_atb};
use crate::metrics::{sample_logloss, DEFAULT_PROB_EPS};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    WideDeep,
    DeepFm,
    Dcn,
    DcnV2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::WideDeep, ModelKind::DeepFm, ModelKind::Dcn, ModelKind::DcnV2];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::WideDeep => "wd",
            ModelKind::DeepFm => "deepfm",
            ModelKind::Dcn => "dcn",
            ModelKind::DcnV2 => "dcnv2",
        }
    }

    pub fn has_wide(self) -> bool {
        matches!(self, ModelKind::WideDeep | ModelKind::DeepFm)
    }

    pub fn has_cross(self) -> bool {
        matches!(self, ModelKind::Dcn | ModelKind::DcnV2)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wd" | "w&d" | "widedeep" | "wide_deep" | "wide-deep" => Ok(ModelKind::WideDeep),
            "deepfm" => Ok(ModelKind::DeepFm),
            "dcn" => Ok(ModelKind::Dcn),
            "dcnv2" | "dcn-v2" | "dcn_v2" => Ok(ModelKind::DcnV2),
            _ => Err(Error::invalid(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub cross_layers: usize,
    pub embed_sigma: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            embed_dim: 10,
            hidden: vec![400, 400, 400],
            cross_layers: 3,
            embed_sigma: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LinearSlot {
    w: Range<usize>,
    b: Range<usize>,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CrossSlot {
    w: Range<usize>,
    b: Range<usize>,
}

/// Offsets of each dense tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayout {
    kind: ModelKind,
    input_width: usize,
    cross_width: usize,
    mlp: Vec<LinearSlot>,
    w0: Option<usize>,
    cross: Vec<CrossSlot>,
    cross_out: Option<Range<usize>>,
    len: usize,
}

impl DenseLayout {
    pub fn new(kind: ModelKind, n_fields: usize, n_dense: usize, dim: usize, hidden: &[usize], cross_layers: usize) -> Result<Self> {
        let input_width = n_fields * dim + n_dense;
        if input_width == 0 {
            return Err(Error::invalid("model needs at least one input feature"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let mut mlp = Vec::new();
        let mut n_in = input_width;
        for &n_out in hidden.iter().chain(std::iter::once(&1)) {
            mlp.push(LinearSlot {
                w: take(n_out * n_in),
                b: take(n_out),
                n_in,
                n_out,
            });
            n_in = n_out;
        }
        let w0 = kind.has_wide().then(|| take(1).start);
        let cross_width = n_fields * dim;
        let mut cross = Vec::new();
        let mut cross_out = None;
        if kind.has_cross() {
            if cross_width == 0 {
                return Err(Error::invalid("cross network needs categorical fields"));
            }
            let w_len = if kind == ModelKind::Dcn { cross_width } else { cross_width * cross_width };
            for _ in 0..cross_layers {
                cross.push(CrossSlot {
                    w: take(w_len),
                    b: take(cross_width),
                });
            }
            cross_out = Some(take(cross_width));
        }
        Ok(DenseLayout {
            kind,
            input_width,
            cross_width,
            mlp,
            w0,
            cross,
            cross_out,
            len: off,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// `(name, range)` for every tensor, in storage order.
    pub fn tensors(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (l, s) in self.mlp.iter().enumerate() {
            out.push((format!("mlp{l}.w"), s.w.clone()));
            out.push((format!("mlp{l}.b"), s.b.clone()));
        }
        if let Some(i) = self.w0 {
            out.push(("w0".into(), i..i + 1));
        }
        for (l, s) in self.cross.iter().enumerate() {
            out.push((format!("cross{l}.w"), s.w.clone()));
            out.push((format!("cross{l}.b"), s.b.clone()));
        }
        if let Some(r) = &self.cross_out {
            out.push(("cross_out".into(), r.clone()));
        }
        out.sort_by_key(|(_, r)| r.start);
        out
    }
}

/// All dense parameters (MLP, wide bias, cross layers) in one flat vector.
/// A gradient has the same type and layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub layout: DenseLayout,
    pub values: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(layout: DenseLayout) -> Self {
        let values = vec![0.0; layout.len];
        DenseParams { layout, values }
    }

    /// Kaiming (fan-in) normal weights, zero biases.
    pub fn kaiming(layout: DenseLayout, seed: u64) -> Self {
        let mut p = Self::zeros(layout);
        let mut rng = rng::seeded(seed);
        let mut fill = |r: Range<usize>, fan_in: usize, v: &mut [f64]| {
            let std = (2.0 / fan_in as f64).sqrt();
            for x in &mut v[r] {
                *x = rng.sample::<f64, _>(StandardNormal) * std;
            }
        };
        let l = p.layout.clone();
        for s in &l.mlp {
            fill(s.w.clone(), s.n_in, &mut p.values);
        }
        for s in &l.cross {
            fill(s.w.clone(), l.cross_width, &mut p.values);
        }
        if let Some(r) = &l.cross_out {
            fill(r.clone(), l.cross_width, &mut p.values);
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }

    fn slice_mut(&mut self, r: &Range<usize>) -> &mut [f64] {
        &mut self.values[r.clone()]
    }
}

/// Activations of the MLP for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    batch: usize,
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer, the last one being the output.
    pre: Vec<Vec<f64>>,
}

/// Affine + ReLU stack ending in one linear output unit. Returns the output per row.
pub fn mlp_forward(params: &DenseParams, input: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache)> {
    let layers = &params.layout.mlp;
    if input.len() != batch * layers[0].n_in {
        return Err(Error::invalid(format!(
            "MLP input has {} entries, expected {} × {}",
            input.len(),
            batch,
            layers[0].n_in
        )));
    }
    let mut inputs = vec![input.to_vec()];
    let mut pre = Vec::with_capacity(layers.len());
    for (l, s) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(batch * s.n_out);
        for _ in 0..batch {
            z.extend_from_slice(params.slice(&s.b));
        }
        gemm_abt(batch, s.n_in, s.n_out, &inputs[l], params.slice(&s.w), 1.0, &mut z);
        if l + 1 < layers.len() {
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
        }
        pre.push(z);
    }
    let out = pre.last().cloned().unwrap_or_default();
    Ok((out, MlpCache { batch, inputs, pre }))
}

/// Adds parameter gradients into `grads` and returns the gradient with
/// respect to the input.
pub fn mlp_backward(params: &DenseParams, cache: &MlpCache, upstream: &[f64], grads: &mut DenseParams) -> Result<Vec<f64>> {
    let layers = &params.layout.mlp;
    let b = cache.batch;
    if upstream.len() != b {
        return Err(Error::invalid("MLP upstream must hold one value per row"));
    }
    let mut delta = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let s = &layers[l];
        if l + 1 < layers.len() {
            for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        gemm_atb(s.n_out, b, s.n_in, &delta, &cache.inputs[l], 1.0, grads.slice_mut(&s.w));
        let gb = grads.slice_mut(&s.b);
        for row in delta.chunks(s.n_out) {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut next = vec![0.0; b * s.n_in];
        gemm_ab(b, s.n_out, s.n_in, &delta, params.slice(&s.w), 0.0, &mut next);
        delta = next;
    }
    Ok(delta)
}

/// `w₀ + Σ_j w_j[id_j]` per row, for a one-dimensional table.
pub fn lr_head(weights: &EmbeddingTable, w0: f64, ids: &[u32], batch: usize) -> Result<Vec<f64>> {
    if weights.dim() != 1 {
        return Err(Error::invalid("wide weights must be a one-dimensional table"));
    }
    let (gathered, _) = lookup_ids(weights, ids, batch)?;
    let nf = weights.n_fields();
    Ok((0..batch)
        .map(|i| w0 + gathered[i * nf..(i + 1) * nf].iter().sum::<f64>())
        .collect())
}

/// Second-order FM term per row, `½(‖Σ_j v_j‖² − Σ_j ‖v_j‖²)`, from a
/// `batch × n_fields × dim` block. Also returns `Σ_j v_j` per row.
pub fn fm_second_order(emb: &[f64], batch: usize, n_fields: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; batch];
    let mut sums = vec![0.0; batch * dim];
    for i in 0..batch {
        let row = &emb[i * n_fields * dim..(i + 1) * n_fields * dim];
        let sum = &mut sums[i * dim..(i + 1) * dim];
        let mut sq = 0.0;
        for v in row.chunks(dim) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            sq += dot(v, v);
        }
        out[i] = 0.5 * (dot(sum, sum) - sq);
    }
    (out, sums)
}

/// `x₀ (x_l·w) + b + x_l`.
pub fn dcn_cross_layer(x0: &[f64], xl: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let s = dot(xl, w);
    x0.iter().zip(xl).zip(b).map(|((a, x), c)| a * s + c + x).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossGrads {
    pub dx0: Vec<f64>,
    pub dxl: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn dcn_cross_backward(x0: &[f64], xl: &[f64], w: &[f64], g: &[f64]) -> CrossGrads {
    let s = dot(xl, w);
    let ds = dot(g, x0);
    CrossGrads {
        dx0: g.iter().map(|v| v * s).collect(),
        dxl: g.iter().zip(w).map(|(v, wk)| v + ds * wk).collect(),
        dw: xl.iter().map(|x| ds * x).collect(),
        db: g.to_vec(),
    }
}

/// `x₀ ⊙ (W x_l + b) + x_l` with `W` row-major `d×d`.
pub fn dcnv2_cross_layer(x0: &[f64], xl: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x0.len();
    (0..d)
        .map(|r| x0[r] * (dot(&w[r * d..(r + 1) * d], xl) + b[r]) + xl[r])
        .collect()
}

pub fn dcnv2_cross_backward(x0: &[f64], xl: &[f64], w: &[f64], b: &[f64], g: &[f64]) -> CrossGrads {
    let d = x0.len();
    let u: Vec<f64> = (0..d).map(|r| dot(&w[r * d..(r + 1) * d], xl) + b[r]).collect();
    let du: Vec<f64> = g.iter().zip(x0).map(|(a, c)| a * c).collect();
    let mut dw = vec![0.0; d * d];
    let mut dxl = g.to_vec();
    for r in 0..d {
        for c in 0..d {
            dw[r * d + c] = du[r] * xl[c];
            dxl[c] += du[r] * w[r * d + c];
        }
    }
    CrossGrads {
        dx0: g.iter().zip(&u).map(|(a, c)| a * c).collect(),
        dxl,
        dw,
        db: du,
    }
}

/// Dense parameters plus the embedding table and (for W&D and DeepFM) the
/// one-dimensional wide table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub n_dense: usize,
    pub dense: DenseParams,
    pub embed: EmbeddingTable,
    pub wide: Option<EmbeddingTable>,
}

impl Model {
    pub fn new(config: ModelConfig, schema: &Schema, seed: u64) -> Result<Self> {
        let vocab = schema.vocab_sizes();
        let layout = DenseLayout::new(
            config.kind,
            vocab.len(),
            schema.n_dense(),
            config.embed_dim,
            &config.hidden,
            config.cross_layers,
        )?;
        let dense = DenseParams::kaiming(layout, rng::derive_seed(seed, 11));
        let embed = EmbeddingTable::init(&vocab, config.embed_dim, config.embed_sigma, rng::derive_seed(seed, 12))?;
        let wide = config.kind.has_wide().then(|| EmbeddingTable::zeros(&vocab, 1));
        Ok(Model {
            n_dense: schema.n_dense(),
            config,
            dense,
            embed,
            wide,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn is_finite(&self) -> bool {
        self.dense.is_finite() && self.embed.is_finite() && self.wide.as_ref().is_none_or(|w| w.is_finite())
    }

    pub fn predict(&self, batch: &Batch<'_>) -> Result<Vec<f64>> {
        Ok(model_forward(self, batch)?.0)
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub batch_size: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    embed: Vec<f64>,
    record: LookupRecord,
    wide_record: Option<LookupRecord>,
    mlp: MlpCache,
    fm_sums: Vec<f64>,
    /// `x₀ … x_L` per cross layer, each `batch × width`.
    cross_xs: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Which hidden units are active, row-major per layer.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = self.mlp.pre.len().saturating_sub(1);
        self.mlp.pre[..hidden].iter().flatten().map(|&z| z > 0.0).collect()
    }

    /// Smallest absolute hidden pre-activation, or infinity without hidden layers.
    pub fn min_kink_distance(&self) -> f64 {
        let hidden = self.mlp.pre.len().saturating_sub(1);
        self.mlp.pre[..hidden].iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Runs the model on raw inputs:`ids` is `batch × n_fields`, `dense_in` is
/// `batch × n_dense`.
pub fn forward_raw(model: &Model, ids: &[u32], dense_in: &[f64], batch: usize) -> Result<ForwardCache> {
    let nf = model.embed.n_fields();
    let d = model.embed.dim();
    let nd = model.n_dense;
    if dense_in.len() != batch * nd {
        return Err(Error::invalid("dense feature block does not match batch size"));
    }
    let (embed, record) = lookup_ids(&model.embed, ids, batch)?;
    let width = nf * d + nd;
    let mut input = Vec::with_capacity(batch * width);
    for i in 0..batch {
        input.extend_from_slice(&embed[i * nf * d..(i + 1) * nf * d]);
        input.extend_from_slice(&dense_in[i * nd..(i + 1) * nd]);
    }
    let (mut logits, mlp) = mlp_forward(&model.dense, &input, batch)?;
    let layout = &model.dense.layout;

    let mut wide_record = None;
    if let Some(wide) = &model.wide {
        let w0 = model.dense.values[layout.w0.expect("wide models carry w0")];
        let (g, rec) = lookup_ids(wide, ids, batch)?;
        for i in 0..batch {
            logits[i] += w0 + g[i * nf..(i + 1) * nf].iter().sum::<f64>();
        }
        wide_record = Some(rec);
    }

    let mut fm_sums = Vec::new();
    if model.kind() == ModelKind::DeepFm {
        let (fm, sums) = fm_second_order(&embed, batch, nf, d);
        logits.iter_mut().zip(&fm).for_each(|(l, f)| *l += f);
        fm_sums = sums;
    }

    let mut cross_xs = Vec::new();
    if let Some(out) = &layout.cross_out {
        let cw = layout.cross_width;
        cross_xs.push(embed.clone());
        for slot in &layout.cross {
            let w = model.dense.slice(&slot.w);
            let b = model.dense.slice(&slot.b);
            let prev = cross_xs.last().expect("x0 pushed");
            let mut next = Vec::with_capacity(batch * cw);
            for i in 0..batch {
                let x0 = &embed[i * cw..(i + 1) * cw];
                let xl = &prev[i * cw..(i + 1) * cw];
                next.extend(match model.kind() {
                    ModelKind::Dcn => dcn_cross_layer(x0, xl, w, b),
                    _ => dcnv2_cross_layer(x0, xl, w, b),
                });
            }
            cross_xs.push(next);
        }
        let p = model.dense.slice(out);
        let last = cross_xs.last().expect("x0 pushed");
        for i in 0..batch {
            logits[i] += dot(&last[i * cw..(i + 1) * cw], p);
        }
    }

    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(ForwardCache {
        batch_size: batch,
        logits,
        probs,
        embed,
        record,
        wide_record,
        mlp,
        fm_sums,
        cross_xs,
    })
}

pub fn model_forward(model: &Model, batch: &Batch<'_>) -> Result<(Vec<f64>, ForwardCache)> {
    let n = batch.size();
    let mut ids = Vec::with_capacity(n * model.embed.n_fields());
    let mut dense = Vec::with_capacity(n * model.n_dense);
    for i in 0..n {
        ids.extend_from_slice(batch.ids(i));
        dense.extend_from_slice(batch.dense(i));
    }
    let cache = forward_raw(model, &ids, &dense, n)?;
    Ok((cache.probs.clone(), cache))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)`; equals `-ln(1 - sigmoid(z))` without the cancellation.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Scope {
    /// Embedding and wide tables.
    #[default]
    Embeddings,
    All,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub dense: DenseParams,
    pub embed: SparseGradient,
    pub wide: Option<SparseGradient>,
}

/// Mean clamped cross-entropy and its gradients. With `l2 > 0` the loss
/// gains `(λ/2)‖w‖²` over the in-scope tensors and their gradients gain
/// `λ·w`; sparse gradients then list every column of every field, with
/// count 0 for ids absent from the batch.
pub fn loss_and_backward(
    model: &Model,
    labels: &[u8],
    cache: &ForwardCache,
    l2: f64,
    scope: L2Scope,
) -> Result<(f64, ModelGradients)> {
    let b = cache.batch_size;
    if labels.len() != b {
        return Err(Error::invalid("labels do not match the batch"));
    }
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let eps = DEFAULT_PROB_EPS;
    let mut loss = 0.0;
    let mut dlogit = vec![0.0; b];
    for i in 0..b {
        let p = cache.probs[i];
        if p > eps && p < 1.0 - eps {
            let z = cache.logits[i];
            loss += if labels[i] == 1 { softplus(-z) } else { softplus(z) };
            dlogit[i] = p - labels[i] as f64;
        } else {
            loss += sample_logloss(p, labels[i], eps);
        }
    }
    loss /= b as f64;

    let layout = &model.dense.layout;
    let nf = model.embed.n_fields();
    let d = model.embed.dim();
    let ew = nf * d;
    let mut grads = DenseParams::zeros(layout.clone());

    let dinput = mlp_backward(&model.dense, &cache.mlp, &dlogit, &mut grads)?;
    let width = layout.input_width;
    let mut de = vec![0.0; b * ew];
    for i in 0..b {
        de[i * ew..(i + 1) * ew].copy_from_slice(&dinput[i * width..i * width + ew]);
    }

    let mut wide_grad = None;
    if let (Some(rec), Some(w0)) = (&cache.wide_record, layout.w0) {
        grads.values[w0] += dlogit.iter().sum::<f64>();
        let up: Vec<f64> = (0..b).flat_map(|i| std::iter::repeat_n(dlogit[i], nf)).collect();
        wide_grad = Some(accumulate_gradients(rec, &up)?);
    }

    if model.kind() == ModelKind::DeepFm {
        for i in 0..b {
            let sum = &cache.fm_sums[i * d..(i + 1) * d];
            for j in 0..nf {
                let o = (i * nf + j) * d;
                for k in 0..d {
                    de[o + k] += dlogit[i] * (sum[k] - cache.embed[o + k]);
                }
            }
        }
    }

    if let Some(out) = &layout.cross_out {
        let last = cache.cross_xs.last().expect("cross cache");
        let p = model.dense.slice(out).to_vec();
        {
            let gp = grads.slice_mut(out);
            for i in 0..b {
                let x = &last[i * ew..(i + 1) * ew];
                gp.iter_mut().zip(x).for_each(|(g, v)| *g += dlogit[i] * v);
            }
        }
        for i in 0..b {
            let x0 = &cache.embed[i * ew..(i + 1) * ew];
            let mut g: Vec<f64> = p.iter().map(|v| v * dlogit[i]).collect();
            let mut dx0 = vec![0.0; ew];
            for (l, slot) in layout.cross.iter().enumerate().rev() {
                let xl = &cache.cross_xs[l][i * ew..(i + 1) * ew];
                let w = model.dense.slice(&slot.w);
                let cg = match model.kind() {
                    ModelKind::Dcn => dcn_cross_backward(x0, xl, w, &g),
                    _ => dcnv2_cross_backward(x0, xl, w, model.dense.slice(&slot.b), &g),
                };
                dx0.iter_mut().zip(&cg.dx0).for_each(|(a, c)| *a += c);
                grads.slice_mut(&slot.w).iter_mut().zip(&cg.dw).for_each(|(a, c)| *a += c);
                grads.slice_mut(&slot.b).iter_mut().zip(&cg.db).for_each(|(a, c)| *a += c);
                g = cg.dxl;
            }
            let row = &mut de[i * ew..(i + 1) * ew];
            row.iter_mut().zip(dx0.iter().zip(&g)).for_each(|(r, (a, c))| *r += a + c);
        }
    }

    let inv_b = 1.0 / b as f64;
    grads.values.iter_mut().for_each(|g| *g *= inv_b);
    let mut embed_grad = accumulate_gradients(&cache.record, &de)?;

    if l2 != 0.0 {
        if scope != L2Scope::None {
            loss += 0.5 * l2 * model.embed.squared_norm();
            embed_grad = add_l2_dense(&model.embed, &embed_grad, l2);
            if let (Some(w), Some(g)) = (&model.wide, &wide_grad) {
                loss += 0.5 * l2 * w.squared_norm();
                wide_grad = Some(add_l2_dense(w, g, l2));
            }
        }
        if scope == L2Scope::All {
            loss += 0.5 * l2 * dot(&model.dense.values, &model.dense.values);
            grads
                .values
                .iter_mut()
                .zip(&model.dense.values)
                .for_each(|(g, w)| *g += l2 * w);
        }
    }

    Ok((
        loss,
        ModelGradients {
            dense: grads,
            embed: embed_grad,
            wide: wide_grad,
        },
    ))
}

fn add_l2_dense(table: &EmbeddingTable, grad: &SparseGradient, l2: f64) -> SparseGradient {
    let d = table.dim();
    let fields = (0..table.n_fields())
        .map(|j| {
            let vocab = table.vocab_sizes()[j];
            let mut grads = grad.to_dense(j, vocab);
            grads.iter_mut().zip(table.field(j)).for_each(|(g, w)| *g += l2 * w);
            let mut counts = vec![0u32; vocab];
            let fg = grad.field(j);
            for (&id, &c) in fg.ids.iter().zip(&fg.counts) {
                counts[id as usize] = c;
            }
            FieldGradient {
                ids: (0..vocab as u32).collect(),
                counts,
                grads,
            }
        })
        .collect();
    SparseGradient::new(d, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Sample};

    fn schema() -> Schema {
        Schema::standard(2, &[5, 4, 3]).unwrap()
    }

    fn small_model(kind: ModelKind, seed: u64) -> Model {
        let cfg = ModelConfig {
            kind,
            embed_dim: 3,
            hidden: vec![6, 5],
            cross_layers: 2,
            embed_sigma: 0.5,
        };
        Model::new(cfg, &schema(), seed).unwrap()
    }

    fn data() -> Dataset {
        let samples = vec![
            Sample { label: 1, dense: vec![0.5, 1.0], ids: vec![0, 1, 2] },
            Sample { label: 0, dense: vec![1.5, 0.0], ids: vec![3, 1, 0] },
            Sample { label: 1, dense: vec![0.0, 2.0], ids: vec![0, 3, 1] },
        ];
        Dataset::new(schema(), &samples).unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        for kind in ModelKind::ALL {
            let mut m = small_model(kind, 1);
            m.dense.values.iter_mut().for_each(|v| *v = 0.0);
            m.embed = EmbeddingTable::zeros(&[5, 4, 3], 3);
            let ds = data();
            let (p, _) = model_forward(&m, &Batch::full(&ds)).unwrap();
            assert!(p.iter().all(|&v| v == 0.5), "{kind}");
        }
    }

    #[test]
    fn wd_without_deep_is_lr_head() {
        let mut m = small_model(ModelKind::WideDeep, 2);
        let last = m.dense.layout.mlp.last().unwrap().clone();
        m.dense.values[last.w.clone()].iter_mut().for_each(|v| *v = 0.0);
        m.dense.values[last.b.clone()].iter_mut().for_each(|v| *v = 0.0);
        let wide = m.wide.as_mut().unwrap();
        wide.column_mut(0, 3)[0] = 0.7;
        wide.column_mut(1, 1)[0] = -0.2;
        m.dense.values[m.dense.layout.w0.unwrap()] = 0.1;
        let ds = data();
        let cache = forward_raw(&m, &[3, 1, 0], &[1.5, 0.0], 1).unwrap();
        let lr = lr_head(m.wide.as_ref().unwrap(), 0.1, ds.ids_row(1), 1).unwrap();
        assert_eq!(cache.logits[0], lr[0]);
        assert!((lr[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lr_head_zero_weights() {
        let t = EmbeddingTable::zeros(&[4], 1);
        assert_eq!(lr_head(&t, 0.3, &[2, 0], 2).unwrap(), vec![0.3, 0.3]);
        let mut t = EmbeddingTable::zeros(&[5], 1);
        t.column_mut(0, 3)[0] = 1.25;
        assert_eq!(lr_head(&t, 0.5, &[3], 1).unwrap(), vec![1.75]);
    }

    #[test]
    fn fm_examples() {
        let (z, _) = fm_second_order(&[0.0; 4], 1, 2, 2);
        assert_eq!(z, vec![0.0]);
        let (z, _) = fm_second_order(&[1.0, 0.0, 0.0, 1.0], 1, 2, 2);
        assert_eq!(z, vec![0.0]);
        let (z, _) = fm_second_order(&[1.0, 0.0, 1.0, 0.0], 1, 2, 2);
        assert_eq!(z, vec![1.0]);
    }

    #[test]
    fn cross_examples() {
        let x = [0.3, -0.4, 0.5];
        assert_eq!(dcn_cross_layer(&[1.0, 2.0, 3.0], &x, &[0.0; 3], &[0.0; 3]), x.to_vec());
        assert_eq!(
            dcn_cross_layer(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]),
            vec![2.0, 0.0]
        );
        assert_eq!(dcnv2_cross_layer(&[1.0, 2.0, 3.0], &x, &[0.0; 9], &[0.0; 3]), x.to_vec());
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dcnv2_cross_layer(&[1.0; 3], &x, &eye, &[0.0; 3]), vec![0.6, -0.8, 1.0]);
    }

    #[test]
    fn one_layer_relu_by_hand() {
        let layout = DenseLayout::new(ModelKind::Dcn, 0, 1, 1, &[1], 0);
        assert!(layout.is_err());
        let layout = DenseLayout::new(ModelKind::WideDeep, 0, 1, 1, &[1], 0).unwrap();
        let mut p = DenseParams::zeros(layout);
        let s = p.layout.mlp.clone();
        p.values[s[0].w.start] = 1.0;
        p.values[s[1].w.start] = 2.5;
        let (out, _) = mlp_forward(&p, &[-1.0, 0.5, 2.0], 3).unwrap();
        assert_eq!(out, vec![0.0, 1.25, 5.0]);
        assert!(mlp_forward(&p, &[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn half_prob_loss_is_ln2() {
        let mut m = small_model(ModelKind::DeepFm, 3);
        m.dense.values.iter_mut().for_each(|v| *v = 0.0);
        m.embed = EmbeddingTable::zeros(&[5, 4, 3], 3);
        let cache = forward_raw(&m, &[0, 0, 0], &[0.0, 0.0], 1).unwrap();
        let (loss, _) = loss_and_backward(&m, &[1], &cache, 0.0, L2Scope::Embeddings).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        for kind in ModelKind::ALL {
            let m = small_model(kind, 4);
            let ds = data();
            let a = model_forward(&m, &Batch::full(&ds)).unwrap().0;
            let b = model_forward(&m, &Batch::full(&ds)).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unknown_kind() {
        assert!("transformer".parse::<ModelKind>().is_err());
        assert_eq!("W&D".parse::<ModelKind>().unwrap(), ModelKind::WideDeep);
    }
}
