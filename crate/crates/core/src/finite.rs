//! Finite-dimensional mode: in-context classification of labelled vectors
//! under random pixel and class permutations.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::eval::{argmax, TrainedModel};
use crate::io::IdxFile;
use crate::model::{predict, KernelVariant, ModelConfig};
use crate::rng::RngStream;
use crate::training::{split_indices, train_episodes, Episode, LossSpace, TrainConfig, TrainState};

/// Images flattened to rows with values in `[0, 1]`, and their classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = images.dims2()?;
        if n != labels.len() || n == 0 {
            return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    /// Pixel bytes are divided by 255.
    pub fn from_idx(images: &IdxFile, labels: &IdxFile, classes: usize) -> Result<Self> {
        let (n, d) = images.flat_shape();
        if labels.dims.len() != 1 || labels.dims[0] != n {
            return Err(Error::invalid(format!(
                "label file holds {:?} entries for {n} images",
                labels.dims
            )));
        }
        let px = images.data.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(
            Tensor::matrix(n, d, px)?,
            labels.data.iter().map(|&b| b as usize).collect(),
            classes,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.shape()[1]
    }

    /// Rows `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let d = self.dim();
        Self::new(
            Tensor::matrix(range.len(), d, self.images.data()[range.start * d..range.end * d].to_vec())?,
            self.labels[range].to_vec(),
            self.classes,
        )
    }
}

/// `pixels[j]` is the source pixel of output pixel `j`; a label `c` becomes
/// `classes[c]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub pixels: Vec<usize>,
    pub classes: Vec<usize>,
}

impl Permutation {
    pub fn identity(dim: usize, classes: usize) -> Self {
        Self {
            pixels: (0..dim).collect(),
            classes: (0..classes).collect(),
        }
    }

    pub fn random(dim: usize, classes: usize, rng: &mut RngStream) -> Self {
        Self {
            pixels: rng.permutation(dim),
            classes: rng.permutation(classes),
        }
    }

    /// Independent pixel and class permutations; `None` keeps that part fixed.
    pub fn from_seeds(dim: usize, classes: usize, pixel_seed: Option<u64>, class_seed: Option<u64>) -> Self {
        Self {
            pixels: pixel_seed.map_or_else(|| (0..dim).collect(), |s| RngStream::new(s, 4).permutation(dim)),
            classes: class_seed.map_or_else(|| (0..classes).collect(), |s| RngStream::new(s, 5).permutation(classes)),
        }
    }

    fn image(&self, row: &[f64]) -> Vec<f64> {
        self.pixels.iter().map(|&j| row[j]).collect()
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// Permuted images and one-hot permuted labels of the rows `idx`.
pub fn permuted_rows(data: &LabeledImages, idx: &[usize], perm: &Permutation) -> Result<(Tensor, Tensor)> {
    if perm.pixels.len() != data.dim() || perm.classes.len() != data.classes {
        return Err(Error::invalid("permutation does not match the data"));
    }
    let v: Vec<Vec<f64>> = idx.iter().map(|&i| perm.image(data.images.row(i))).collect();
    let u: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| one_hot(perm.classes[data.labels[i]], data.classes))
        .collect();
    Ok((Tensor::from_rows(&v)?, Tensor::from_rows(&u)?))
}

/// One permuted episode; query targets are one-hot rows.
pub fn episode(data: &LabeledImages, context: &[usize], queries: &[usize], perm: &Permutation) -> Result<Episode> {
    let (ctx_v, ctx_u) = permuted_rows(data, context, perm)?;
    let (query_v, query_u) = permuted_rows(data, queries, perm)?;
    Ok(Episode {
        ctx_v,
        ctx_u,
        query_v,
        query_values: query_u.clone(),
        query_u,
    })
}

/// Attention model without the output-stream block, for raw vectors.
pub fn classifier_config(in_dim: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        depth: 4,
        heads: 8,
        head_dim: 16,
        value_dim: 16,
        in_dim,
        out_dim: classes,
        mlp_dim: 100,
        kernel: KernelVariant::ExpDot,
        temperature: None,
        tie_weights: false,
        use_g: false,
        exclude_self: false,
    }
}

/// A fresh random permutation of the whole set for every episode.
pub fn sample_step(data: &LabeledImages, cfg: &TrainConfig, step: usize) -> Result<Vec<(usize, Episode)>> {
    let mut rng = RngStream::new(cfg.seed, 1).derive(step as u64);
    let len = data.len();
    (0..cfg.batch_operators)
        .map(|b| {
            let perm = Permutation::random(data.dim(), data.classes, &mut rng);
            let hi = cfg.context_range.1.min(len - 1);
            let lo = cfg.context_range.0.min(hi);
            let n = lo + rng.index(hi - lo + 1);
            let q = cfg.query_count.min(len - n);
            let (c, qi) = split_indices(len, n, q, &mut rng)?;
            Ok((b, episode(data, &c, &qi, &perm)?))
        })
        .collect()
}

pub fn train(
    data: &LabeledImages,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    state: TrainState,
    on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    if data.dim() != model_cfg.in_dim || data.classes != model_cfg.out_dim {
        return Err(Error::invalid(format!(
            "data dims {} -> {} do not match the model ({} -> {})",
            data.dim(),
            data.classes,
            model_cfg.in_dim,
            model_cfg.out_dim
        )));
    }
    if data.len() < 2 {
        return Err(Error::invalid("need at least two labelled examples"));
    }
    let eye = Tensor::eye(data.classes);
    let synthesis = (train_cfg.loss_space == LossSpace::Grid).then_some(&eye);
    train_episodes(|s| sample_step(data, train_cfg, s), model_cfg, train_cfg, synthesis, state, on_step)
}

pub fn trained(config: ModelConfig, params: crate::model::TransducerParams) -> TrainedModel {
    TrainedModel {
        input: Encoding::Identity { dim: config.in_dim },
        output: Encoding::Identity { dim: config.out_dim },
        config,
        params,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub episodes: usize,
    pub context: usize,
    pub queries: usize,
    pub accuracy: f64,
    pub per_episode: Vec<f64>,
}

/// Accuracy over `episodes` random draws seen through `perm`. Context
/// examples come from `support`, queries from `data`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &TrainedModel,
    support: &LabeledImages,
    data: &LabeledImages,
    perm: &Permutation,
    context_n: usize,
    query_n: usize,
    episodes: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if context_n == 0 || context_n > support.len() || query_n == 0 || query_n > data.len() || episodes == 0 {
        return Err(Error::invalid("context and query sizes must fit the data"));
    }
    let base = RngStream::new(seed, 6);
    let mut per_episode = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = base.derive(e as u64);
        let c = &rng.permutation(support.len())[..context_n];
        let q = &rng.permutation(data.len())[..query_n];
        let (cv, cu) = permuted_rows(support, c, perm)?;
        let (qv, qu) = permuted_rows(data, q, perm)?;
        let pred = predict(&model.params, &model.config, &cv, &cu, &qv)?;
        let hits = (0..query_n).filter(|&j| argmax(pred.row(j)) == argmax(qu.row(j))).count();
        per_episode.push(hits as f64 / query_n as f64);
    }
    Ok(AccuracyReport {
        episodes,
        context: context_n,
        queries: query_n,
        accuracy: per_episode.iter().sum::<f64>() / episodes as f64,
        per_episode,
    })
}
