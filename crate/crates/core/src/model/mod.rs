//! The Transducer: a stack of residual kernel-attention layers that maps a
//! context of example pairs and a set of query inputs to query outputs.
//!
//! Rows of the sequence are context elements followed by queries. Each layer
//! updates two residual streams,
//!
//! ```text
//! v <- v + F(v)
//! u~ = u + G(u)            (u~ = u when G is disabled)
//! u <- u~ + W [A_1 V_1(u~_ctx), ..., A_J V_J(u~_ctx)]
//! ```
//!
//! where `A_j` holds the normalized kernel scores between every row's
//! `Q_j v` and the context rows' `K_j v`. Only context rows are keys, so a
//! query never influences anything but its own output. The final u-stream of
//! a query is its prediction; with G disabled this equals the sum of the
//! per-layer kernel outputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Added to every l2 score so that a key coinciding with its query cannot
/// leave a row summing to zero.
pub const L2_SCORE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    /// `exp(q.k / tau)`
    ExpDot,
    /// `exp(-|q - k|^2 / tau)`
    Rbf,
    /// `|q - k|^2`
    L2,
}

impl std::str::FromStr for KernelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp_dot" | "exp-dot" => Ok(Self::ExpDot),
            "rbf" => Ok(Self::Rbf),
            "l2" => Ok(Self::L2),
            _ => Err(Error::invalid(format!("unknown kernel variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Per-head value dimension `p`.
    pub value_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub mlp_dim: usize,
    pub kernel: KernelVariant,
    /// Defaults to `sqrt(head_dim)` for exp_dot and `head_dim` for rbf.
    pub temperature: Option<f64>,
    pub tie_weights: bool,
    pub use_g: bool,
    /// Drop each context row's own key.
    #[serde(default)]
    pub exclude_self: bool,
}

impl ModelConfig {
    /// Geometry used for the advection-diffusion-reaction experiments:
    /// 32 heads of width 16, hidden width 100.
    pub fn adr(depth: usize, dim: usize) -> Self {
        Self {
            depth,
            heads: 32,
            head_dim: 16,
            value_dim: 16,
            in_dim: dim,
            out_dim: dim,
            mlp_dim: 100,
            kernel: KernelVariant::ExpDot,
            temperature: None,
            tie_weights: false,
            use_g: true,
            exclude_self: false,
        }
    }

    pub fn tau(&self) -> f64 {
        self.temperature.unwrap_or(match self.kernel {
            KernelVariant::ExpDot => (self.head_dim as f64).sqrt(),
            KernelVariant::Rbf | KernelVariant::L2 => self.head_dim as f64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("depth", self.depth),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("value_dim", self.value_dim),
            ("in_dim", self.in_dim),
            ("out_dim", self.out_dim),
            ("mlp_dim", self.mlp_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        let tau = self.tau();
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(())
    }

    /// Number of distinct parameter layers (1 when weights are tied).
    pub fn stored_layers(&self) -> usize {
        if self.tie_weights {
            1
        } else {
            self.depth
        }
    }

    pub fn param_count(&self) -> usize {
        let ffn = |d: usize| 2 * d + d * self.mlp_dim + self.mlp_dim + self.mlp_dim * d + d;
        let head = 2 * self.in_dim * self.head_dim + self.out_dim * self.value_dim;
        let layer = self.heads * head
            + self.heads * self.value_dim * self.out_dim
            + ffn(self.in_dim)
            + if self.use_g { ffn(self.out_dim) } else { 0 };
        self.stored_layers() * layer
    }
}

/// Unnormalized score between a query and a key.
pub fn kernel_score(variant: KernelVariant, q: &[f64], k: &[f64], tau: f64) -> f64 {
    match variant {
        KernelVariant::ExpDot => (q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau).exp(),
        KernelVariant::Rbf => (-sq_dist(q, k) / tau).exp(),
        KernelVariant::L2 => sq_dist(q, k),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `[in_dim, head_dim]`
    pub q: T,
    /// `[in_dim, head_dim]`
    pub k: T,
    /// `[out_dim, value_dim]`
    pub v: T,
}

/// Pre-norm residual block: layer norm, affine, GELU, affine.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub ln_gain: T,
    pub ln_bias: T,
    /// `[d, mlp_dim]`
    pub w1: T,
    /// `[1, mlp_dim]`
    pub b1: T,
    /// `[mlp_dim, d]`
    pub w2: T,
    /// `[1, d]`
    pub b2: T,
}

impl<T> FfnParams<T> {
    fn slots(&self) -> [&T; 6] {
        [&self.ln_gain, &self.ln_bias, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn slots_mut(&mut self) -> [&mut T; 6] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// `[heads * value_dim, out_dim]`
    pub w: T,
    pub f: FfnParams<T>,
    pub g: Option<FfnParams<T>>,
}

/// All learnable parameters. `T` is [`Tensor`] for stored weights and
/// [`Value`] once they are registered on a tape.
///
/// Traversal order, which is also the serialized order, is layer-major, then
/// head-major Q, K, V, then W, then F, then G.
#[derive(Clone, Debug, PartialEq)]
pub struct TransducerParams<T = Tensor> {
    pub layers: Vec<LayerParams<T>>,
}

/// Shape and name of every parameter slot, in traversal order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, d: usize| {
        out.push((format!("{prefix}.ln_gain"), vec![d]));
        out.push((format!("{prefix}.ln_bias"), vec![d]));
        out.push((format!("{prefix}.w1"), vec![d, config.mlp_dim]));
        out.push((format!("{prefix}.b1"), vec![1, config.mlp_dim]));
        out.push((format!("{prefix}.w2"), vec![config.mlp_dim, d]));
        out.push((format!("{prefix}.b2"), vec![1, d]));
    };
    for l in 0..config.stored_layers() {
        for j in 0..config.heads {
            out.push((format!("layer{l}.head{j}.q"), vec![config.in_dim, config.head_dim]));
            out.push((format!("layer{l}.head{j}.k"), vec![config.in_dim, config.head_dim]));
            out.push((format!("layer{l}.head{j}.v"), vec![config.out_dim, config.value_dim]));
        }
        out.push((
            format!("layer{l}.w"),
            vec![config.heads * config.value_dim, config.out_dim],
        ));
        ffn(&mut out, format!("layer{l}.f"), config.in_dim);
        if config.use_g {
            ffn(&mut out, format!("layer{l}.g"), config.out_dim);
        }
    }
    out
}

impl<T> TransducerParams<T> {
    /// Builds a parameter set by drawing slots in traversal order.
    pub fn from_slots(config: &ModelConfig, mut next: impl FnMut() -> Option<T>) -> Result<Self> {
        let mut take = || next().ok_or_else(|| Error::invalid("too few parameter tensors"));
        let ffn = |take: &mut dyn FnMut() -> Result<T>| -> Result<FfnParams<T>> {
            Ok(FfnParams {
                ln_gain: take()?,
                ln_bias: take()?,
                w1: take()?,
                b1: take()?,
                w2: take()?,
                b2: take()?,
            })
        };
        let mut layers = Vec::with_capacity(config.stored_layers());
        for _ in 0..config.stored_layers() {
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                heads.push(HeadParams {
                    q: take()?,
                    k: take()?,
                    v: take()?,
                });
            }
            let w = take()?;
            let f = ffn(&mut take)?;
            let g = if config.use_g { Some(ffn(&mut take)?) } else { None };
            layers.push(LayerParams { heads, w, f, g });
        }
        Ok(Self { layers })
    }

    /// Every slot in traversal order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| {
            let heads = l.heads.iter().flat_map(|h| [&h.q, &h.k, &h.v]);
            heads
                .chain(std::iter::once(&l.w))
                .chain(l.f.slots())
                .chain(l.g.iter().flat_map(FfnParams::slots))
        })
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| {
            let heads = l.heads.iter_mut().flat_map(|h| [&mut h.q, &mut h.k, &mut h.v]);
            heads
                .chain(std::iter::once(&mut l.w))
                .chain(l.f.slots_mut())
                .chain(l.g.iter_mut().flat_map(FfnParams::slots_mut))
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TransducerParams<U> {
        let ffn = |p: &FfnParams<T>, f: &mut dyn FnMut(&T) -> U| FfnParams {
            ln_gain: f(&p.ln_gain),
            ln_bias: f(&p.ln_bias),
            w1: f(&p.w1),
            b1: f(&p.b1),
            w2: f(&p.w2),
            b2: f(&p.b2),
        };
        TransducerParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            q: f(&h.q),
                            k: f(&h.k),
                            v: f(&h.v),
                        })
                        .collect(),
                    w: f(&l.w),
                    f: ffn(&l.f, &mut f),
                    g: l.g.as_ref().map(|g| ffn(g, &mut f)),
                })
                .collect(),
        }
    }
}

impl TransducerParams<Tensor> {
    /// Checks that every slot has the shape the config implies.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = param_layout(config);
        let mut n = 0;
        for (t, (name, shape)) in self.iter().zip(&layout) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            n += 1;
        }
        if n != layout.len() || self.iter().count() != layout.len() {
            return Err(Error::invalid("parameter count does not match the config"));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a tape parameter, in traversal order.
    pub fn register(&self, tape: &mut Tape) -> TransducerParams<Value> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Records every tensor as a constant.
    pub fn constants(&self, tape: &mut Tape) -> TransducerParams<Value> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Gaussian weights with std `1/sqrt(fan_in)`, zero biases, unit layer-norm
/// gains.
pub fn init_params(config: &ModelConfig, rng: &mut RngStream) -> Result<TransducerParams> {
    config.validate()?;
    let mut slots = param_layout(config).into_iter().map(|(name, shape)| {
        if name.ends_with("ln_gain") {
            Tensor::ones(&shape)
        } else if name.ends_with("ln_bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            Tensor::zeros(&shape)
        } else {
            let std = 1.0 / (shape[0] as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * rng.standard_normal()).collect();
            Tensor::new(shape, data).expect("layout shape")
        }
    });
    TransducerParams::from_slots(config, || slots.next())
}

fn layer_index(config: &ModelConfig, l: usize) -> usize {
    if config.tie_weights {
        0
    } else {
        l
    }
}

struct Sequence {
    context: usize,
    queries: usize,
    ones: Value,
    mask: Vec<bool>,
}

fn ffn(tape: &mut Tape, seq: &Sequence, p: &FfnParams<Value>, x: Value) -> Result<Value> {
    let h = tape.layer_norm(x, p.ln_gain, p.ln_bias)?;
    let h = tape.matmul(h, p.w1)?;
    let b1 = tape.matmul(seq.ones, p.b1)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.w2)?;
    let b2 = tape.matmul(seq.ones, p.b2)?;
    let h = tape.add(h, b2)?;
    tape.add(x, h)
}

/// Normalized scores of every row against the context rows, `[rows, context]`.
fn attention_weights(
    tape: &mut Tape,
    config: &ModelConfig,
    mask: &[bool],
    q: Value,
    k: Value,
) -> Result<Value> {
    let tau = config.tau();
    match config.kernel {
        KernelVariant::ExpDot => {
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / tau)?;
            tape.masked_softmax(logits, mask)
        }
        KernelVariant::Rbf => {
            let d = tape.sq_dist(q, k)?;
            let logits = tape.scale(d, -1.0 / tau)?;
            tape.masked_softmax(logits, mask)
        }
        KernelVariant::L2 => {
            let d = tape.sq_dist(q, k)?;
            let shape = tape.shape(d).to_vec();
            let floor = tape.constant(Tensor::filled(&shape, L2_SCORE_FLOOR));
            let s = tape.add(d, floor)?;
            tape.masked_normalize(s, mask)
        }
    }
}

fn kernel_attention(
    tape: &mut Tape,
    config: &ModelConfig,
    seq: &Sequence,
    layer: &LayerParams<Value>,
    v: Value,
    u: Value,
    mut trace: Option<&mut Vec<Value>>,
) -> Result<Value> {
    let vc = tape.slice_rows(v, 0, seq.context)?;
    let uc = tape.slice_rows(u, 0, seq.context)?;
    let mut outs = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let q = tape.matmul(v, h.q)?;
        let k = tape.matmul(vc, h.k)?;
        let a = attention_weights(tape, config, &seq.mask, q, k)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(a);
        }
        let values = tape.matmul(uc, h.v)?;
        outs.push(tape.matmul(a, values)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, layer.w)
}

#[allow(clippy::too_many_arguments)]
fn run(
    tape: &mut Tape,
    params: &TransducerParams<Value>,
    config: &ModelConfig,
    ctx_v: Value,
    ctx_u: Value,
    query_v: Value,
    query_u: Option<Value>,
    mut trace: Option<&mut Vec<Value>>,
) -> Result<Value> {
    let (c, dv) = dims(tape, ctx_v)?;
    let (cu, du) = dims(tape, ctx_u)?;
    let (nq, qv) = dims(tape, query_v)?;
    if c == 0 {
        return Err(Error::invalid("the context must hold at least one pair"));
    }
    if cu != c || dv != config.in_dim || qv != config.in_dim || du != config.out_dim {
        return Err(Error::invalid(format!(
            "sequence dims (context {c}x{dv} -> {cu}x{du}, queries {nq}x{qv}) do not match \
             the config ({} -> {})",
            config.in_dim, config.out_dim
        )));
    }
    if params.layers.len() != config.stored_layers() {
        return Err(Error::invalid("parameter layers do not match the config"));
    }
    if config.exclude_self && c < 2 {
        return Err(Error::invalid("excluding self-attention needs at least two context pairs"));
    }
    let rows = c + nq;
    let mut mask = vec![true; rows * c];
    if config.exclude_self {
        for i in 0..c {
            mask[i * c + i] = false;
        }
    }
    let seq = Sequence {
        context: c,
        queries: nq,
        ones: tape.constant(Tensor::ones(&[rows, 1])),
        mask,
    };
    let init = match query_u {
        Some(q) if tape.shape(q) == [nq, config.out_dim] => q,
        Some(_) => return Err(Error::invalid("query initialization has the wrong shape")),
        None => tape.constant(Tensor::zeros(&[nq, config.out_dim])),
    };
    let mut v = tape.concat_rows(&[ctx_v, query_v])?;
    let mut u = tape.concat_rows(&[ctx_u, init])?;
    for l in 0..config.depth {
        let layer = &params.layers[layer_index(config, l)];
        v = ffn(tape, &seq, &layer.f, v)?;
        let ut = match &layer.g {
            Some(g) if config.use_g => ffn(tape, &seq, g, u)?,
            _ => u,
        };
        let att = kernel_attention(tape, config, &seq, layer, v, ut, trace.as_deref_mut())?;
        u = tape.add(ut, att)?;
    }
    tape.slice_rows(u, seq.context, seq.queries)
}

fn dims(tape: &Tape, v: Value) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::invalid(format!("expected a matrix, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Records the forward pass on `tape`. Inputs are row matrices: context
/// inputs `[C, in_dim]`, context outputs `[C, out_dim]` and query inputs
/// `[Q, in_dim]`; the result holds the query predictions `[Q, out_dim]`.
pub fn forward(
    tape: &mut Tape,
    params: &TransducerParams<Value>,
    config: &ModelConfig,
    ctx_v: Value,
    ctx_u: Value,
    query_v: Value,
) -> Result<Value> {
    run(tape, params, config, ctx_v, ctx_u, query_v, None, None)
}

/// Like [`forward`], but the query rows of the u-stream start from
/// `query_u` instead of zero. Only used to probe the masking contract.
pub fn forward_with_query_init(
    tape: &mut Tape,
    params: &TransducerParams<Value>,
    config: &ModelConfig,
    ctx_v: Value,
    ctx_u: Value,
    query_v: Value,
    query_u: Value,
) -> Result<Value> {
    run(tape, params, config, ctx_v, ctx_u, query_v, Some(query_u), None)
}

/// Query predictions without gradient tracking.
pub fn predict(
    params: &TransducerParams,
    config: &ModelConfig,
    ctx_v: &Tensor,
    ctx_u: &Tensor,
    query_v: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.constants(&mut tape);
    let (a, b, c) = (
        tape.constant(ctx_v.clone()),
        tape.constant(ctx_u.clone()),
        tape.constant(query_v.clone()),
    );
    let out = run(&mut tape, &p, config, a, b, c, None, None)?;
    Ok(tape.value(out).clone())
}

/// Normalized attention weights `[C + Q, C]` of every layer and head,
/// layer-major.
pub fn attention_maps(
    params: &TransducerParams,
    config: &ModelConfig,
    ctx_v: &Tensor,
    ctx_u: &Tensor,
    query_v: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let p = params.constants(&mut tape);
    let (a, b, c) = (
        tape.constant(ctx_v.clone()),
        tape.constant(ctx_u.clone()),
        tape.constant(query_v.clone()),
    );
    let mut trace = Vec::new();
    run(&mut tape, &p, config, a, b, c, None, Some(&mut trace))?;
    Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
}
