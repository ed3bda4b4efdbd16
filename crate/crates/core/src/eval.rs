//! Metrics, transductive baselines and evaluation workflows.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::model::{predict, ModelConfig, TransducerParams};
use crate::pde::{MetaDataset, OperatorDataset};
use crate::rng::RngStream;
use crate::training::{encode_operator, gather, split_indices, EncodedOperator};

/// Points whose squared truth norm falls below this are left out of the
/// relative error.
pub const RMSE_FLOOR: f64 = 1e-12;

/// z-value of a two-sided 95% normal interval.
const Z95: f64 = 1.959_963_984_540_054;

fn check_same(pred: &GridFunction, truth: &GridFunction) -> Result<()> {
    if !pred.same_shape(truth) {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![pred.grid().len(), pred.dim()],
            rhs: vec![truth.grid().len(), truth.dim()],
        });
    }
    Ok(())
}

/// Mean over points of the squared (vector) error.
pub fn mse(pred: &GridFunction, truth: &GridFunction) -> Result<f64> {
    check_same(pred, truth)?;
    mse_values(pred.values(), truth.values(), truth.dim())
}

/// Relative error: mean over points of `|pred - truth|^2 / |truth|^2`.
pub fn rmse(pred: &GridFunction, truth: &GridFunction) -> Result<f64> {
    Ok(rmse_counted(pred, truth)?.0)
}

/// [`rmse`] together with the number of points dropped by [`RMSE_FLOOR`].
pub fn rmse_counted(pred: &GridFunction, truth: &GridFunction) -> Result<(f64, usize)> {
    check_same(pred, truth)?;
    rmse_values(pred.values(), truth.values(), truth.dim())
}

fn per_point<'a>(pred: &'a [f64], truth: &'a [f64], dim: usize) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.len() != truth.len() || dim == 0 || truth.len() % dim != 0 || truth.is_empty() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    Ok(pred.chunks(dim).zip(truth.chunks(dim)).map(|(p, t)| {
        let err: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = t.iter().map(|b| b * b).sum();
        (err, norm)
    }))
}

pub fn mse_values(pred: &[f64], truth: &[f64], dim: usize) -> Result<f64> {
    let k = truth.len() / dim.max(1);
    Ok(per_point(pred, truth, dim)?.map(|(e, _)| e).sum::<f64>() / k as f64)
}

pub fn rmse_values(pred: &[f64], truth: &[f64], dim: usize) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let (mut used, mut dropped) = (0usize, 0usize);
    for (e, n) in per_point(pred, truth, dim)? {
        if n < RMSE_FLOOR {
            dropped += 1;
        } else {
            sum += e / n;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("every point has a vanishing target; relative error undefined"));
    }
    Ok((sum / used as f64, dropped))
}

/// Uniform average of the outputs of the `k` context inputs closest to
/// `query` in Euclidean distance; ties go to the lower index.
pub fn knn_regress(ctx_v: &Tensor, ctx_u: &Tensor, query: &[f64], k: usize) -> Result<Vec<f64>> {
    let (c, d) = ctx_v.dims2()?;
    let (cu, du) = ctx_u.dims2()?;
    if c == 0 || cu != c {
        return Err(Error::invalid("k-NN needs a non-empty context with matching outputs"));
    }
    if k == 0 || k > c {
        return Err(Error::invalid(format!("k = {k} outside 1..={c}")));
    }
    if query.len() != d {
        return Err(Error::invalid(format!("query has {} features, context {d}", query.len())));
    }
    let mut order: Vec<(f64, usize)> = (0..c)
        .map(|i| {
            let dist: f64 = ctx_v.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = vec![0.0; du];
    for &(_, i) in &order[..k] {
        out.iter_mut().zip(ctx_u.row(i)).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= k as f64);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    /// `[queries, out_dim]`
    pub predictions: Tensor,
    pub gamma: f64,
    /// `max |(G + lambda I) alpha - U|`.
    pub residual: f64,
}

/// `1 / median` of the pairwise squared distances between context rows.
pub fn median_gamma(ctx_v: &Tensor) -> Result<f64> {
    let (c, _) = ctx_v.dims2()?;
    let mut d = Vec::with_capacity(c * c.saturating_sub(1) / 2);
    for i in 0..c {
        for j in 0..i {
            d.push(sq_dist(ctx_v.row(i), ctx_v.row(j)));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let med = median(&d);
    if med > 0.0 {
        Ok(1.0 / med)
    } else {
        Ok(1.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel ridge regression with `G_ij = exp(-gamma |v_i - v_j|^2)`.
/// `gamma` defaults to the median heuristic.
pub fn ridge_rbf_regress(
    ctx_v: &Tensor,
    ctx_u: &Tensor,
    queries: &Tensor,
    lambda: f64,
    gamma: Option<f64>,
) -> Result<RidgeFit> {
    let (c, d) = ctx_v.dims2()?;
    let (cu, du) = ctx_u.dims2()?;
    let (nq, dq) = queries.dims2()?;
    if c == 0 || cu != c || dq != d {
        return Err(Error::invalid("ridge: context and query shapes disagree"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("ridge: lambda must be positive"));
    }
    let gamma = match gamma {
        Some(g) => g,
        None => median_gamma(ctx_v)?,
    };
    let mut g = DMatrix::<f64>::zeros(c, c);
    for i in 0..c {
        g[(i, i)] = 1.0;
        for j in 0..i {
            let k = (-gamma * sq_dist(ctx_v.row(i), ctx_v.row(j))).exp();
            g[(i, j)] = k;
            g[(j, i)] = k;
        }
    }
    let mut a = g.clone();
    for i in 0..c {
        a[(i, i)] += lambda;
    }
    let u = DMatrix::from_row_slice(c, du, ctx_u.data());
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solve("ridge system is not positive definite".into()))?;
    let alpha = chol.solve(&u);
    let residual = (&a * &alpha - &u).abs().max();
    let mut out = Vec::with_capacity(nq * du);
    for q in 0..nq {
        let kq = DVector::from_iterator(c, (0..c).map(|i| (-gamma * sq_dist(ctx_v.row(i), queries.row(q))).exp()));
        let p = alpha.transpose() * kq;
        out.extend(p.iter());
    }
    Ok(RidgeFit {
        predictions: Tensor::matrix(nq, du, out)?,
        gamma,
        residual,
    })
}

/// Feature space used by the k-NN and ridge baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSpace {
    Grid,
    Mode,
}

/// A trained model together with how it sees functions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: TransducerParams,
    pub input: Encoding,
    pub output: Encoding,
}

pub enum Regressor<'a> {
    Transducer(&'a TrainedModel),
    Knn { k: usize, space: BaselineSpace },
    Ridge {
        lambda: f64,
        gamma: Option<f64>,
        space: BaselineSpace,
    },
}

impl Regressor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Transducer(_) => "transducer",
            Self::Knn { .. } => "knn",
            Self::Ridge { .. } => "ridge",
        }
    }

    /// Predicted outputs `[queries, K]` at the evaluation points.
    pub fn regress(&self, op: &EncodedOperator, raw_v: &Tensor, context: &[usize], queries: &[usize]) -> Result<Tensor> {
        let k_out = op.u_values.shape()[1];
        match self {
            Self::Transducer(m) => {
                let pred = predict(
                    &m.params,
                    &m.config,
                    &gather(&op.v, context)?,
                    &gather(&op.u, context)?,
                    &gather(&op.v, queries)?,
                )?;
                let syn = m.output.synthesis(k_out)?;
                let (q, f) = pred.dims2()?;
                let mut out = vec![0.0; q * k_out];
                crate::autodiff::gemm(pred.data(), (q, f), false, syn.data(), (f, k_out), false, &mut out, 0.0);
                Tensor::matrix(q, k_out, out)
            }
            Self::Knn { k, space } => {
                let feats = if *space == BaselineSpace::Grid { raw_v } else { &op.v };
                let cv = gather(feats, context)?;
                let cu = gather(&op.u_values, context)?;
                let rows: Vec<Vec<f64>> = queries
                    .iter()
                    .map(|&q| knn_regress(&cv, &cu, feats.row(q), *k))
                    .collect::<Result<_>>()?;
                Tensor::from_rows(&rows)
            }
            Self::Ridge { lambda, gamma, space } => {
                let feats = if *space == BaselineSpace::Grid { raw_v } else { &op.v };
                let fit = ridge_rbf_regress(
                    &gather(feats, context)?,
                    &gather(&op.u_values, context)?,
                    &gather(feats, queries)?,
                    *lambda,
                    *gamma,
                )?;
                Ok(fit.predictions)
            }
        }
    }
}

/// An operator in both raw and encoded form.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedOperator {
    pub encoded: EncodedOperator,
    /// Raw inputs `[pairs, n]`.
    pub raw_v: Tensor,
}

pub fn prepare(ds: &OperatorDataset, input: &Encoding, output: &Encoding) -> Result<PreparedOperator> {
    let encoded = encode_operator(ds, input, output)?;
    let rows: Vec<&[f64]> = ds.pairs.iter().map(|(v, _)| v.values()).collect();
    Ok(PreparedOperator {
        encoded,
        raw_v: Tensor::from_rows(&rows)?,
    })
}

pub fn prepare_meta(meta: &MetaDataset, input: &Encoding, output: &Encoding) -> Result<Vec<PreparedOperator>> {
    meta.datasets.par_iter().map(|d| prepare(d, input, output)).collect()
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * (var / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub regressor: String,
    pub context: usize,
    pub queries: usize,
    pub mse: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mean_mse: f64,
    pub mean_rmse: f64,
    pub ci_rmse: f64,
    pub median_rmse: f64,
    /// Points left out of the relative error because the target vanished.
    pub excluded_points: usize,
    pub seconds: f64,
}

impl RegressionReport {
    pub const CSV_HEADER: &'static str = "regressor,n,mean_rmse,ci95,median_rmse,mean_mse,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:.3}",
            self.regressor,
            self.context,
            self.mean_rmse,
            self.ci_rmse,
            self.median_rmse,
            self.mean_mse,
            self.seconds
        )
    }
}

/// Regresses `query_n` held-out pairs of every operator from `context_n`
/// others. Splits depend only on `seed` and the operator index: every
/// regressor sees the same episodes, the queries do not change with
/// `context_n`, and larger contexts extend smaller ones.
pub fn evaluate(
    regressor: &Regressor,
    ops: &[PreparedOperator],
    context_n: usize,
    query_n: usize,
    seed: u64,
) -> Result<RegressionReport> {
    if ops.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let start = Instant::now();
    let per_op: Vec<(f64, f64, usize)> = ops
        .par_iter()
        .enumerate()
        .map(|(i, op)| {
            let mut rng = RngStream::new(seed, 2).derive(i as u64);
            let (q, c) = split_indices(op.encoded.len(), query_n, context_n, &mut rng)?;
            let pred = regressor.regress(&op.encoded, &op.raw_v, &c, &q)?;
            let truth = gather(&op.encoded.u_values, &q)?;
            let (mut m, mut r, mut dropped) = (0.0, 0.0, 0);
            for j in 0..q.len() {
                m += mse_values(pred.row(j), truth.row(j), 1)?;
                let (rv, d) = rmse_values(pred.row(j), truth.row(j), 1)?;
                r += rv;
                dropped += d;
            }
            Ok((m / q.len() as f64, r / q.len() as f64, dropped))
        })
        .collect::<Result<_>>()?;
    let mse: Vec<f64> = per_op.iter().map(|x| x.0).collect();
    let rmse: Vec<f64> = per_op.iter().map(|x| x.1).collect();
    let (mean_rmse, ci_rmse) = mean_ci(&rmse);
    let median_rmse = median(&rmse);
    Ok(RegressionReport {
        regressor: regressor.name().to_string(),
        context: context_n,
        queries: query_n,
        mean_mse: mean_ci(&mse).0,
        mse,
        rmse,
        mean_rmse,
        ci_rmse,
        median_rmse,
        excluded_points: per_op.iter().map(|x| x.2).sum(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-element error that outlier flagging is based on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierScore {
    /// Relative pointwise error, as reported everywhere else.
    #[default]
    Rmse,
    /// Plain squared error, which does not blow up where the output
    /// crosses zero.
    Mse,
}

impl std::str::FromStr for OutlierScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Self::Rmse),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::invalid(format!("unknown outlier score '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub regressions: usize,
    pub score: OutlierScore,
    /// Mean relative error of each element over the regressions where it was
    /// a query.
    pub element_rmse: Vec<f64>,
    /// Mean squared error of each element over the same regressions.
    pub element_mse: Vec<f64>,
    /// How often each element was a query.
    pub element_counts: Vec<usize>,
    /// Mean and population std of the per-element scores.
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub flagged: Vec<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl OutlierReport {
    /// Per-element scores as CSV, for histograms.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("index,mean_rmse,mean_mse,count,flagged\n");
        for (i, c) in self.element_counts.iter().enumerate() {
            let (r, m) = (self.element_rmse[i], self.element_mse[i]);
            s.push_str(&format!("{i},{r:e},{m:e},{c},{}\n", self.flagged.contains(&i) as u8));
        }
        s
    }
}

/// Flags elements whose mean error over repeated random splits exceeds the
/// mean of all elements by more than three standard deviations.
pub fn outlier_detect(
    model: &TrainedModel,
    dataset: &OperatorDataset,
    regressions: usize,
    split_fraction: f64,
    score: OutlierScore,
    seed: u64,
    labels: Option<&[bool]>,
) -> Result<OutlierReport> {
    let n = dataset.len();
    if n < 4 {
        return Err(Error::invalid("outlier detection needs at least four pairs"));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) || regressions == 0 {
        return Err(Error::invalid("split fraction must lie in (0, 1) and regressions >= 1"));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::invalid("one contamination label per pair is required"));
        }
    }
    let op = encode_operator(dataset, &model.input, &model.output)?;
    let ctx = ((n as f64 * split_fraction).round() as usize).clamp(1, n - 1);
    let regressor = Regressor::Transducer(model);
    let base = RngStream::new(seed, 3);
    // Splits are drawn over a content-defined order so that reordering the
    // dataset reorders the report and nothing else.
    let order = canonical_order(dataset);
    let runs: Vec<Vec<(usize, f64, f64)>> = (0..regressions)
        .into_par_iter()
        .map(|r| {
            let mut rng = base.derive(r as u64);
            let (c, q) = split_indices(n, ctx, n - ctx, &mut rng)?;
            let (c, q): (Vec<usize>, Vec<usize>) = (c.iter().map(|&i| order[i]).collect(), q.iter().map(|&i| order[i]).collect());
            let pred = regressor.regress(&op, &op.u_values, &c, &q)?;
            q.iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (p, t) = (pred.row(j), op.u_values.row(i));
                    Ok((i, rmse_values(p, t, 1)?.0, mse_values(p, t, 1)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![(0.0, 0.0); n];
    let mut counts = vec![0usize; n];
    for run in &runs {
        for &(i, r, m) in run {
            sums[i].0 += r;
            sums[i].1 += m;
            counts[i] += 1;
        }
    }
    let average = |pick: fn(&(f64, f64)) -> f64| -> Vec<f64> {
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { pick(s) / c as f64 } else { f64::NAN })
            .collect()
    };
    let element_rmse = average(|s| s.0);
    let element_mse = average(|s| s.1);
    let scores = match score {
        OutlierScore::Rmse => &element_rmse,
        OutlierScore::Mse => &element_mse,
    };
    let seen: Vec<f64> = scores.iter().copied().filter(|x| x.is_finite()).collect();
    let mean = seen.iter().sum::<f64>() / seen.len() as f64;
    let std = (seen.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / seen.len() as f64).sqrt();
    let threshold = mean + 3.0 * std;
    let flagged: Vec<usize> = (0..n).filter(|&i| scores[i] > threshold).collect();
    let (precision, recall) = match labels {
        Some(l) => {
            let tp = flagged.iter().filter(|&&i| l[i]).count() as f64;
            let pos = l.iter().filter(|&&x| x).count() as f64;
            let p = if flagged.is_empty() { 1.0 } else { tp / flagged.len() as f64 };
            let r = if pos == 0.0 { 1.0 } else { tp / pos };
            (Some(p), Some(r))
        }
        None => (None, None),
    };
    Ok(OutlierReport {
        regressions,
        score,
        element_rmse,
        element_mse,
        element_counts: counts,
        mean,
        std,
        threshold,
        flagged,
        precision,
        recall,
    })
}

/// Indices of the pairs sorted by their values.
fn canonical_order(ds: &OperatorDataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let key = |i: usize| ds.pairs[i].0.values().iter().chain(ds.pairs[i].1.values());
    idx.sort_by(|&a, &b| {
        key(a)
            .zip(key(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Replaces a random `fraction` of `clean` with pairs drawn from `source`;
/// returns the mixed dataset and which of its elements were replaced.
pub fn contaminate(
    clean: &OperatorDataset,
    source: &OperatorDataset,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(OperatorDataset, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("contamination fraction must lie in [0, 1]"));
    }
    let k = (fraction * clean.len() as f64).round() as usize;
    if k > source.len() {
        return Err(Error::invalid(format!("need {k} source pairs, have {}", source.len())));
    }
    if !clean.pairs[0].0.same_shape(&source.pairs[0].0) || !clean.pairs[0].1.same_shape(&source.pairs[0].1) {
        return Err(Error::invalid("source pairs do not match the clean grid"));
    }
    let targets = &rng.permutation(clean.len())[..k];
    let picks = &rng.permutation(source.len())[..k];
    let mut pairs = clean.pairs.clone();
    let mut labels = vec![false; clean.len()];
    for (&t, &p) in targets.iter().zip(picks) {
        pairs[t] = source.pairs[p].clone();
        labels[t] = true;
    }
    let mut out = OperatorDataset::new(pairs)?;
    out.resampled = clean.resampled;
    Ok((out, labels))
}

/// Index of the largest coordinate; the first one wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub predicted: Vec<usize>,
    pub accuracy: f64,
}

/// Finite-dimensional regression followed by argmax over the outputs.
/// `ctx_u` holds one-hot rows; `labels` are the true classes of the queries.
pub fn classify_finite(
    model: &TrainedModel,
    ctx_v: &Tensor,
    ctx_u: &Tensor,
    queries: &Tensor,
    labels: &[usize],
) -> Result<ClassificationReport> {
    let (nq, d) = queries.dims2()?;
    if d != model.config.in_dim || ctx_u.dims2()?.1 != model.config.out_dim {
        return Err(Error::invalid(format!(
            "data dims {d} -> {} do not match the checkpoint ({} -> {})",
            ctx_u.dims2()?.1,
            model.config.in_dim,
            model.config.out_dim
        )));
    }
    if labels.len() != nq {
        return Err(Error::invalid("one label per query is required"));
    }
    let pred = predict(&model.params, &model.config, ctx_v, ctx_u, queries)?;
    let predicted: Vec<usize> = (0..nq).map(|i| argmax(pred.row(i))).collect();
    let correct = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(ClassificationReport {
        accuracy: correct as f64 / nq.max(1) as f64,
        predicted,
    })
}
