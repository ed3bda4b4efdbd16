use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use transducer_core::encoding::Encoding;
use transducer_core::eval::{
    contaminate, evaluate, outlier_detect, OutlierScore, prepare_meta, BaselineSpace, RegressionReport, Regressor, TrainedModel,
};
use transducer_core::finite::{self, LabeledImages, Permutation};
use transducer_core::io::{
    load_checkpoint, load_datasets, read_header, save_checkpoint, save_meta_dataset, write_atomic, Checkpoint,
    IdxFile, TrainingProvenance, IDX_IMAGES, IDX_LABELS,
};
use transducer_core::model::{KernelVariant, ModelConfig};
use transducer_core::pde::{generate_meta_dataset, GenerationConfig, Split};
use transducer_core::training::{encode_meta, train, CurvePoint, LossSpace, TrainConfig, TrainState, TrainingCurve};
use transducer_core::RngStream;

use crate::{
    Baseline, BaselineArgs, ClassifyMode, Cli, Command, EvaluateArgs, ExtrapolateArgs, GenerateArgs, OutliersArgs,
    SplitArg, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate(a) => generate(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Evaluate(a) => evaluate_cmd(a, seed),
        Command::Extrapolate(a) => extrapolate(a, seed),
        Command::Outliers(a) => outliers(a, seed),
        Command::Classify(a) => classify(a.mode, seed),
        Command::Inspect { path } => inspect(&path),
    }
}

/// `defaults` with the keys of `overlay` written over it, recursively.
fn merge(defaults: &mut Value, overlay: Value) {
    match (defaults, overlay) {
        (Value::Object(d), Value::Object(o)) => {
            for (k, v) in o {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, o) => *d = o,
    }
}

fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<Value>) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    serde_json::from_value(v).context("invalid configuration")
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn generate(a: GenerateArgs, seed: u64) -> Result<()> {
    let base = if a.full_scale { GenerationConfig::full_scale(seed) } else { GenerationConfig::desk(seed) };
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut cfg: GenerationConfig = layered(&base, file)?;
    cfg.seed = seed;
    if let Some(x) = a.n_datasets {
        cfg.n_datasets = x;
    }
    if let Some(x) = a.pairs {
        cfg.pairs = x;
    }
    if let Some(x) = a.grid {
        cfg.grid = x;
    }
    if let Some(x) = a.t {
        cfg.t = x;
    }
    if let Some(x) = a.l {
        cfg.l = x;
    }
    if let Some(s) = a.split {
        cfg.split = match s {
            SplitArg::MetaTrain => Split::MetaTrain,
            SplitArg::MetaTest => Split::MetaTest,
        };
    }
    let meta = generate_meta_dataset(&cfg)?;
    save_meta_dataset(&a.out, &meta).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} operators x {} pairs to {} ({} unstable trajectories redrawn)",
        meta.len(),
        cfg.pairs,
        a.out.display(),
        meta.resampled()
    );
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainSettings {
    model: ModelConfig,
    modes: usize,
    train: TrainConfig,
}

fn train_settings(a: &TrainArgs, grid: usize, seed: u64) -> Result<TrainSettings> {
    let defaults = TrainSettings {
        model: ModelConfig::adr(4, 50),
        modes: 25,
        train: TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    };
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut s: TrainSettings = layered(&defaults, file)?;
    let m = &mut s.model;
    if let Some(x) = a.depth {
        m.depth = x;
    }
    if let Some(x) = a.heads {
        m.heads = x;
    }
    if let Some(x) = a.head_dim {
        m.head_dim = x;
    }
    if let Some(x) = a.value_dim {
        m.value_dim = x;
    }
    if let Some(x) = a.mlp {
        m.mlp_dim = x;
    }
    if let Some(k) = &a.kernel {
        m.kernel = k.parse::<KernelVariant>()?;
    }
    if a.temperature.is_some() {
        m.temperature = a.temperature;
    }
    m.tie_weights |= a.tie_weights;
    if a.no_g {
        m.use_g = false;
    }
    if let Some(x) = a.modes {
        s.modes = x;
    }
    s.modes = s.modes.min(grid / 2 + 1);
    s.model.in_dim = 2 * s.modes;
    s.model.out_dim = 2 * s.modes;
    let t = &mut s.train;
    t.seed = seed;
    if let Some(x) = a.steps {
        t.steps = x;
    }
    if let Some(x) = a.lr {
        t.lr = x;
    }
    if let Some(x) = a.batch {
        t.batch_operators = x;
    }
    if let Some(x) = a.query_count {
        t.query_count = x;
    }
    if let Some(x) = a.context_min {
        t.context_range.0 = x;
    }
    if let Some(x) = a.context_max {
        t.context_range.1 = x;
    }
    if let Some(x) = &a.loss_space {
        t.loss_space = match x.as_str() {
            "grid" => LossSpace::Grid,
            "mode" => LossSpace::Mode,
            other => bail!("unknown loss space {other:?} (grid or mode)"),
        };
    }
    Ok(s)
}

fn read_curve(path: &Path, before: usize) -> Result<TrainingCurve> {
    let mut curve = TrainingCurve::default();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(curve);
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("malformed curve line {line:?} in {}", path.display());
        }
        let p = CurvePoint {
            step: f[0].parse()?,
            loss: f[1].parse()?,
            lr: f[2].parse()?,
            seconds: f[3].parse()?,
        };
        if p.step < before {
            curve.points.push(p);
        }
    }
    Ok(curve)
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let meta = load_datasets(&a.meta)
        .with_context(|| format!("reading {}", a.meta.display()))?
        .into_meta()?;
    let grid = meta.grid().len();
    let curve_path = a.curve.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let (settings, state) = if a.resume {
        let ck = load_checkpoint(&a.out).with_context(|| format!("resuming from {}", a.out.display()))?;
        let mut train_cfg = ck
            .provenance
            .train_config
            .clone()
            .ok_or_else(|| anyhow!("checkpoint carries no training configuration"))?;
        if let Some(x) = a.steps {
            train_cfg.steps = x;
        }
        let adam = ck.adam.clone().ok_or_else(|| anyhow!("checkpoint carries no optimizer state"))?;
        let modes = ck.input.dim() / 2;
        let state = TrainState {
            params: ck.params,
            adam,
            step: ck.provenance.steps,
            curve: read_curve(&curve_path, ck.provenance.steps)?,
        };
        (
            TrainSettings {
                model: ck.config,
                modes,
                train: train_cfg,
            },
            state,
        )
    } else {
        let s = train_settings(&a, grid, seed)?;
        let state = TrainState::fresh(&s.model, s.train.seed)?;
        (s, state)
    };
    let enc = Encoding::fourier(settings.modes, grid)?;
    let em = encode_meta(&meta, enc, enc)?;
    let checkpoint = |st: &TrainState| Checkpoint {
        config: settings.model.clone(),
        input: enc,
        output: enc,
        params: st.params.clone(),
        provenance: TrainingProvenance {
            steps: st.step,
            final_loss: st.curve.points.last().map_or(f64::NAN, |p| p.loss),
            seed: settings.train.seed,
            train_config: Some(settings.train.clone()),
            meta_dataset: Some(meta.config.clone()),
        },
        adam: Some(st.adam.clone()),
    };
    let every = a.checkpoint_every.max(1);
    let report = (settings.train.steps / 20).max(1);
    let st = train(&em, &settings.model, &settings.train, state, |st| {
        if st.step % report == 0 {
            eprintln!("step {} loss {:.4e}", st.step, st.curve.tail_mean(report));
        }
        if st.step % every == 0 {
            save_checkpoint(&a.out, &checkpoint(st))?;
            write_atomic(&curve_path, st.curve.to_csv().as_bytes())?;
        }
        Ok(())
    })?;
    save_checkpoint(&a.out, &checkpoint(&st)).with_context(|| format!("writing {}", a.out.display()))?;
    write_text(&curve_path, &st.curve.to_csv())?;
    println!(
        "trained {} steps, final loss {:.4e}; checkpoint {}, curve {}",
        st.step,
        st.curve.tail_mean(report),
        a.out.display(),
        curve_path.display()
    );
    Ok(())
}

fn trained_model(path: &Path) -> Result<TrainedModel> {
    let ck = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainedModel {
        config: ck.config,
        params: ck.params,
        input: ck.input,
        output: ck.output,
    })
}

fn check_grid(model: &TrainedModel, grid: usize) -> Result<()> {
    if let Encoding::Fourier { n_src, .. } = model.input {
        if n_src != grid {
            bail!("checkpoint expects {n_src} grid points, data has {grid}");
        }
    }
    Ok(())
}

fn baselines(b: &BaselineArgs) -> Result<Vec<Regressor<'static>>> {
    let space = match b.baseline_space.as_str() {
        "grid" => BaselineSpace::Grid,
        "mode" => BaselineSpace::Mode,
        other => bail!("unknown baseline space {other:?} (grid or mode)"),
    };
    Ok(b.baselines
        .iter()
        .map(|x| match x {
            Baseline::Knn => Regressor::Knn { k: b.knn_k, space },
            Baseline::Ridge => Regressor::Ridge {
                lambda: b.ridge_lambda,
                gamma: b.ridge_gamma,
                space,
            },
        })
        .collect())
}

fn evaluate_cmd(a: EvaluateArgs, seed: u64) -> Result<()> {
    let model = trained_model(&a.checkpoint)?;
    let meta = load_datasets(&a.meta_test)
        .with_context(|| format!("reading {}", a.meta_test.display()))?
        .into_meta()?;
    check_grid(&model, meta.grid().len())?;
    let ops = prepare_meta(&meta, &model.input, &model.output)?;
    let mut regressors = vec![Regressor::Transducer(&model)];
    regressors.extend(baselines(&a.baselines)?);
    let mut reports: Vec<RegressionReport> = Vec::new();
    let mut csv = format!("{}\n", RegressionReport::CSV_HEADER);
    for &n in &a.contexts {
        for r in &regressors {
            let rep = evaluate(r, &ops, n, a.queries, seed)?;
            csv.push_str(&rep.csv_row());
            csv.push('\n');
            eprintln!("{}", rep.csv_row());
            reports.push(rep);
        }
    }
    write_text(&a.out, &csv)?;
    if let Some(j) = &a.json {
        write_json(j, &reports)?;
    }
    Ok(())
}

fn extrapolate(a: ExtrapolateArgs, seed: u64) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let model = TrainedModel {
        config: ck.config,
        params: ck.params,
        input: ck.input,
        output: ck.output,
    };
    let base = ck
        .provenance
        .meta_dataset
        .unwrap_or_else(|| GenerationConfig::desk(seed));
    let mut csv = String::from("l,t,mean_rmse,ci95,median_rmse,mean_mse\n");
    for &l in &a.l {
        for &t in &a.t {
            let cfg = GenerationConfig {
                n_datasets: a.n_datasets,
                pairs: a.pairs,
                l,
                t,
                seed,
                split: Split::MetaTest,
                ..base.clone()
            };
            let meta = generate_meta_dataset(&cfg)?;
            check_grid(&model, meta.grid().len())?;
            let ops = prepare_meta(&meta, &model.input, &model.output)?;
            let rep = evaluate(&Regressor::Transducer(&model), &ops, a.context, a.queries, seed)?;
            let row = format!(
                "{l},{t},{:e},{:e},{:e},{:e}",
                rep.mean_rmse, rep.ci_rmse, rep.median_rmse, rep.mean_mse
            );
            eprintln!("{row}");
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write_text(&a.out, &csv)
}

fn pick(path: &Path, index: usize) -> Result<transducer_core::pde::OperatorDataset> {
    let mut file = load_datasets(path).with_context(|| format!("reading {}", path.display()))?;
    if index >= file.datasets.len() {
        bail!("{} holds {} operators, index {index} requested", path.display(), file.datasets.len());
    }
    Ok(file.datasets.swap_remove(index))
}

fn outliers(a: OutliersArgs, seed: u64) -> Result<()> {
    let model = trained_model(&a.checkpoint)?;
    let clean = pick(&a.dataset, a.index)?;
    check_grid(&model, clean.grid().len())?;
    let (data, labels) = match (a.contaminate, &a.source) {
        (Some(frac), Some(src)) => {
            let source = pick(src, a.source_index)?;
            let (d, l) = contaminate(&clean, &source, frac, &mut RngStream::new(seed, 7))?;
            (d, Some(l))
        }
        _ => (clean, None),
    };
    let score: OutlierScore = a.score.parse()?;
    let report = outlier_detect(&model, &data, a.regressions, a.split, score, seed, labels.as_deref())?;
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        report: &'a transducer_core::eval::OutlierReport,
        contaminated: Option<Vec<usize>>,
    }
    let contaminated = labels.map(|l| (0..l.len()).filter(|&i| l[i]).collect());
    write_json(
        &a.out,
        &Out {
            report: &report,
            contaminated,
        },
    )?;
    if let Some(h) = &a.histogram {
        write_text(h, &report.histogram_csv())?;
    }
    println!(
        "flagged {:?} (threshold {:.4e}); precision {:?} recall {:?}",
        report.flagged, report.threshold, report.precision, report.recall
    );
    Ok(())
}

fn images(data: &crate::IdxArgs) -> Result<LabeledImages> {
    let img = IdxFile::read(&data.images, Some(IDX_IMAGES)).with_context(|| format!("reading {}", data.images.display()))?;
    let lab = IdxFile::read(&data.labels, Some(IDX_LABELS)).with_context(|| format!("reading {}", data.labels.display()))?;
    Ok(LabeledImages::from_idx(&img, &lab, data.classes)?)
}

fn classify(mode: ClassifyMode, seed: u64) -> Result<()> {
    match mode {
        ClassifyMode::Train {
            data,
            out,
            steps,
            lr,
            heads,
            depth,
            context_min,
            context_max,
            query_count,
        } => {
            let set = images(&data)?;
            let mut cfg = finite::classifier_config(set.dim(), set.classes);
            cfg.heads = heads;
            cfg.depth = depth;
            let tc = TrainConfig {
                steps,
                lr,
                seed,
                context_range: (context_min, context_max),
                query_count,
                loss_space: LossSpace::Mode,
                ..TrainConfig::default()
            };
            let report = (steps / 20).max(1);
            let st = finite::train(&set, &cfg, &tc, TrainState::fresh(&cfg, seed)?, |st| {
                if st.step % report == 0 {
                    eprintln!("step {} loss {:.4e}", st.step, st.curve.tail_mean(report));
                }
                Ok(())
            })?;
            let m = finite::trained(cfg, st.params.clone());
            save_checkpoint(
                &out,
                &Checkpoint {
                    config: m.config,
                    input: m.input,
                    output: m.output,
                    params: st.params,
                    provenance: TrainingProvenance {
                        steps: st.step,
                        final_loss: st.curve.tail_mean(1),
                        seed,
                        train_config: Some(tc),
                        meta_dataset: None,
                    },
                    adam: Some(st.adam),
                },
            )?;
            println!("trained {steps} steps; checkpoint {}", out.display());
            Ok(())
        }
        ClassifyMode::Test {
            data,
            checkpoint,
            support_images,
            support_labels,
            pixel_perm_seed,
            class_perm_seed,
            context,
            queries,
            episodes,
            out,
        } => {
            let model = trained_model(&checkpoint)?;
            let set = images(&data)?;
            let support = match (support_images, support_labels) {
                (Some(i), Some(l)) => images(&crate::IdxArgs {
                    images: i,
                    labels: l,
                    classes: data.classes,
                })?,
                _ => set.clone(),
            };
            if set.dim() != model.config.in_dim || set.classes != model.config.out_dim {
                bail!(
                    "images are {} -> {} but the checkpoint expects {} -> {}",
                    set.dim(),
                    set.classes,
                    model.config.in_dim,
                    model.config.out_dim
                );
            }
            let perm = Permutation::from_seeds(set.dim(), set.classes, pixel_perm_seed, class_perm_seed);
            let rep = finite::evaluate(&model, &support, &set, &perm, context, queries, episodes, seed)?;
            println!("accuracy {:.4} over {} episodes", rep.accuracy, rep.episodes);
            if let Some(o) = out {
                write_json(&o, &rep)?;
            }
            Ok(())
        }
    }
}

fn inspect(path: &PathBuf) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 8 {
        let idx = IdxFile::from_bytes(&bytes, None)?;
        println!(
            "{}",
            serde_json::json!({"format": "idx", "magic": format!("{:#010x}", idx.magic()), "dims": idx.dims})
        );
        return Ok(());
    }
    let (magic, mut header) = read_header(&bytes)?;
    // The per-operator records can be long; show their count instead.
    if let Some(list) = header.get_mut("datasets") {
        let n = list.as_array().map_or(0, |a| a.len());
        *list = Value::String(format!("<{n} records>"));
    }
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({"magic": magic, "header": header}))?);
    Ok(())
}
