//! Meta-training: episodes drawn from a meta-dataset, a mean-squared-error
//! objective, and Adam with step-wise learning-rate halving.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, predict, ModelConfig, TransducerParams};
use crate::pde::{MetaDataset, OperatorDataset};
use crate::rng::RngStream;

/// One operator with every pair already encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedOperator {
    /// `[pairs, in_dim]`
    pub v: Tensor,
    /// `[pairs, out_dim]`
    pub u: Tensor,
    /// Ground-truth outputs at the evaluation points, `[pairs, K]`.
    pub u_values: Tensor,
}

impl EncodedOperator {
    pub fn len(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episode(&self, context: &[usize], queries: &[usize]) -> Result<Episode> {
        Ok(Episode {
            ctx_v: gather(&self.v, context)?,
            ctx_u: gather(&self.u, context)?,
            query_v: gather(&self.v, queries)?,
            query_u: gather(&self.u, queries)?,
            query_values: gather(&self.u_values, queries)?,
        })
    }
}

/// Rows `idx` of a matrix, in that order.
pub fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    if idx.is_empty() {
        return Err(Error::invalid("cannot gather zero rows"));
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= r {
            return Err(Error::invalid(format!("row {i} out of range for {r} rows")));
        }
        out.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, out)
}

/// A meta-dataset in model coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMeta {
    pub input: Encoding,
    pub output: Encoding,
    pub operators: Vec<EncodedOperator>,
}

fn pairs_to_rows(pairs: &[(crate::GridFunction, crate::GridFunction)], out: bool) -> Result<Tensor> {
    let rows: Vec<&[f64]> = pairs
        .iter()
        .map(|(v, u)| if out { u.values() } else { v.values() })
        .collect();
    Tensor::from_rows(&rows)
}

pub fn encode_operator(ds: &OperatorDataset, input: &Encoding, output: &Encoding) -> Result<EncodedOperator> {
    let v_raw = pairs_to_rows(&ds.pairs, false)?;
    let u_raw = pairs_to_rows(&ds.pairs, true)?;
    Ok(EncodedOperator {
        v: input.encode_rows(&v_raw)?,
        u: output.encode_rows(&u_raw)?,
        u_values: u_raw,
    })
}

pub fn encode_meta(meta: &MetaDataset, input: Encoding, output: Encoding) -> Result<EncodedMeta> {
    let operators = meta
        .datasets
        .par_iter()
        .map(|d| encode_operator(d, &input, &output))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedMeta {
        input,
        output,
        operators,
    })
}

/// Context rows, query rows and the query targets of one regression.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub ctx_v: Tensor,
    pub ctx_u: Tensor,
    pub query_v: Tensor,
    pub query_u: Tensor,
    pub query_values: Tensor,
}

/// Disjoint random context and query index sets.
pub fn split_indices(
    len: usize,
    context_n: usize,
    query_count: usize,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if context_n == 0 || query_count == 0 || context_n + query_count > len {
        return Err(Error::invalid(format!(
            "cannot split {len} pairs into {context_n} context and {query_count} queries"
        )));
    }
    let perm = rng.permutation(len);
    Ok((
        perm[..context_n].to_vec(),
        perm[context_n..context_n + query_count].to_vec(),
    ))
}

type Pairs = Vec<(crate::GridFunction, crate::GridFunction)>;

pub fn split_episode(
    dataset: &OperatorDataset,
    context_n: usize,
    query_count: usize,
    rng: &mut RngStream,
) -> Result<(Pairs, Pairs)> {
    let (c, q) = split_indices(dataset.len(), context_n, query_count, rng)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.pairs[i].clone()).collect();
    Ok((pick(&c), pick(&q)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// Squared error of the reconstructed outputs at the evaluation points.
    Grid,
    /// Squared error of the feature vectors.
    Mode,
}

/// Mean squared error of the query predictions, recorded on `tape`.
/// `synthesis` maps output features to evaluation points and is required
/// for [`LossSpace::Grid`].
pub fn episode_loss(
    tape: &mut Tape,
    params: &TransducerParams<Value>,
    config: &ModelConfig,
    ep: &Episode,
    space: LossSpace,
    synthesis: Option<&Tensor>,
) -> Result<Value> {
    let (a, b, c) = (
        tape.constant(ep.ctx_v.clone()),
        tape.constant(ep.ctx_u.clone()),
        tape.constant(ep.query_v.clone()),
    );
    let pred = forward(tape, params, config, a, b, c)?;
    prediction_loss(tape, pred, ep, space, synthesis)
}

fn prediction_loss(
    tape: &mut Tape,
    pred: Value,
    ep: &Episode,
    space: LossSpace,
    synthesis: Option<&Tensor>,
) -> Result<Value> {
    let (out, truth) = match space {
        LossSpace::Grid => {
            let s = synthesis.ok_or_else(|| Error::invalid("grid-space loss needs a synthesis matrix"))?;
            let s = tape.constant(s.clone());
            (tape.matmul(pred, s)?, tape.constant(ep.query_values.clone()))
        }
        LossSpace::Mode => (pred, tape.constant(ep.query_u.clone())),
    };
    let d = tape.sub(out, truth)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq, None)
}

/// [`episode_loss`] evaluated without gradient tracking.
pub fn episode_mse(
    params: &TransducerParams,
    config: &ModelConfig,
    ep: &Episode,
    space: LossSpace,
    synthesis: Option<&Tensor>,
) -> Result<f64> {
    let pred = predict(params, config, &ep.ctx_v, &ep.ctx_u, &ep.query_v)?;
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let l = prediction_loss(&mut tape, p, ep, space, synthesis)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: impl IntoIterator<Item = &'a Tensor>,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    let grads: Vec<&Tensor> = grads.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *x -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Base rate halved once for every milestone at or before `step`.
pub fn lr_at(base: f64, milestones: &[usize], step: usize) -> f64 {
    let crossed = milestones.iter().filter(|&&m| step >= m).count();
    base * 0.5f64.powi(crossed as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_operators: usize,
    pub query_count: usize,
    /// Inclusive range of context sizes; the upper end is capped so every
    /// episode keeps at least one query.
    pub context_range: (usize, usize),
    pub lr: f64,
    /// Steps at which the rate halves; `None` means 50%, 75% and 90% of the
    /// budget.
    pub milestones: Option<Vec<usize>>,
    pub adam: AdamConfig,
    pub loss_space: LossSpace,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_operators: 1,
            query_count: 10,
            context_range: (20, 100),
            lr: 1e-4,
            milestones: None,
            adam: AdamConfig::default(),
            loss_space: LossSpace::Grid,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        self.milestones.clone().unwrap_or_else(|| {
            [0.5, 0.75, 0.9]
                .iter()
                .map(|f| (f * self.steps as f64).round() as usize)
                .collect()
        })
    }

    /// Step budget equivalent to `epochs` passes over `n_operators`.
    pub fn steps_for_epochs(epochs: usize, n_operators: usize, batch: usize) -> usize {
        epochs * n_operators.div_ceil(batch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.context_range;
        if lo == 0 || hi < lo {
            return Err(Error::invalid(format!("invalid context range [{lo}, {hi}]")));
        }
        if self.query_count == 0 || self.batch_operators == 0 {
            return Err(Error::invalid("query_count and batch_operators must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,seconds\n");
        for p in &self.points {
            s.push_str(&format!("{},{:e},{:e},{:.3}\n", p.step, p.loss, p.lr, p.seconds));
        }
        s
    }

    /// Mean loss of the last `n` points.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.points.len()).max(1);
        let tail = &self.points[self.points.len().saturating_sub(k)..];
        tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: TransducerParams,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: usize,
    pub curve: TrainingCurve,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(config, &mut RngStream::new(seed, 0))?;
        Ok(Self {
            adam: AdamState::new(params.iter()),
            params,
            step: 0,
            curve: TrainingCurve::default(),
        })
    }
}

/// Samples the operators, context sizes and splits of one step.
pub fn sample_step(
    meta: &EncodedMeta,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<(usize, Episode)>> {
    let mut rng = RngStream::new(cfg.seed, 1).derive(step as u64);
    (0..cfg.batch_operators)
        .map(|_| {
            let d = rng.index(meta.operators.len());
            let op = &meta.operators[d];
            let len = op.len();
            if len < 2 {
                return Err(Error::invalid(format!("operator {d} has fewer than two pairs")));
            }
            let hi = cfg.context_range.1.min(len - 1);
            let lo = cfg.context_range.0.min(hi);
            let n = lo + rng.index(hi - lo + 1);
            let q = cfg.query_count.min(len - n);
            let (c, qi) = split_indices(len, n, q, &mut rng)?;
            Ok((d, op.episode(&c, &qi)?))
        })
        .collect()
}

/// Loss and parameter gradients of one episode, on a private tape.
pub fn episode_gradients(
    params: &TransducerParams,
    config: &ModelConfig,
    ep: &Episode,
    space: LossSpace,
    synthesis: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let loss = episode_loss(&mut tape, &p, config, ep, space, synthesis)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.params().cloned().collect()))
}

/// Runs optimization from `state` until `train_cfg.steps` steps are done.
/// `on_step` sees the state after every update and may stop training by
/// returning an error.
pub fn train(
    meta: &EncodedMeta,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    state: TrainState,
    on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    if meta.operators.is_empty() {
        return Err(Error::invalid("meta-dataset is empty"));
    }
    if meta.input.dim() != model_cfg.in_dim || meta.output.dim() != model_cfg.out_dim {
        return Err(Error::invalid(format!(
            "data dims {} -> {} do not match the model ({} -> {})",
            meta.input.dim(),
            meta.output.dim(),
            model_cfg.in_dim,
            model_cfg.out_dim
        )));
    }
    let k = meta.operators[0].u_values.shape()[1];
    let synthesis = match train_cfg.loss_space {
        LossSpace::Grid => Some(meta.output.synthesis(k)?),
        LossSpace::Mode => None,
    };
    train_episodes(
        |step| sample_step(meta, train_cfg, step),
        model_cfg,
        train_cfg,
        synthesis.as_ref(),
        state,
        on_step,
    )
}

/// The optimization loop over episodes drawn by `sample(step)`, each tagged
/// with the index of the dataset it came from.
pub fn train_episodes(
    sample: impl Fn(usize) -> Result<Vec<(usize, Episode)>>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    synthesis: Option<&Tensor>,
    mut state: TrainState,
    mut on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    state.params.check(model_cfg)?;
    let milestones = train_cfg.milestones();
    let start = Instant::now();
    let offset = state.curve.points.last().map_or(0.0, |p| p.seconds);
    while state.step < train_cfg.steps {
        let step = state.step;
        let episodes = sample(step)?;
        let results: Vec<(usize, Result<(f64, Vec<Tensor>)>)> = episodes
            .par_iter()
            .map(|(d, ep)| {
                let r = episode_gradients(
                    &state.params,
                    model_cfg,
                    ep,
                    train_cfg.loss_space,
                    synthesis,
                );
                (*d, r)
            })
            .collect();
        let scale = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor>> = None;
        for (d, r) in results {
            let (l, g) = match r {
                Ok(x) => x,
                Err(Error::NonFinite { .. }) => return Err(Error::TrainingDiverged { step, dataset: d }),
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { step, dataset: d });
            }
            loss += l * scale;
            match &mut total {
                None => {
                    total = Some(
                        g.into_iter()
                            .map(|mut t| {
                                t.data_mut().iter_mut().for_each(|x| *x *= scale);
                                t
                            })
                            .collect(),
                    )
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += scale * y);
                    }
                }
            }
        }
        let grads = total.expect("at least one episode");
        let lr = lr_at(train_cfg.lr, &milestones, step);
        adam_step(state.params.iter_mut(), grads.iter(), &mut state.adam, lr, &train_cfg.adam)?;
        state.step += 1;
        state.curve.points.push(CurvePoint {
            step,
            loss,
            lr,
            seconds: offset + start.elapsed().as_secs_f64(),
        });
        on_step(&state)?;
    }
    Ok(state)
}
