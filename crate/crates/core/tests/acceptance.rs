//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting. The criteria that meta-train models are
//! ignored by default because together they take tens of minutes:
//!
//! ```text
//! cargo test --release -p transducer-core --test acceptance -- --include-ignored --nocapture --test-threads 1
//! ```

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use transducer_core::encoding::Encoding;
use transducer_core::eval::{
    contaminate, evaluate, knn_regress, outlier_detect, prepare_meta, ridge_rbf_regress, OutlierScore, RegressionReport,
    Regressor, TrainedModel, BaselineSpace,
};
use transducer_core::finite::{self, LabeledImages, Permutation};
use transducer_core::io::{
    decode_checkpoint, decode_datasets, encode_checkpoint, encode_datasets, encode_meta_dataset, load_checkpoint,
    save_checkpoint, save_meta_dataset, Checkpoint, IdxFile, TrainingProvenance, IDX_IMAGES, IDX_LABELS,
};
use transducer_core::model::{attention_maps, init_params, predict, KernelVariant, ModelConfig, TransducerParams};
use transducer_core::pde::{adr_solve, generate_meta_dataset, GenerationConfig, MetaDataset, SolverOptions, Split};
use transducer_core::random_fields::{covariance_matrix, AdrCoefficients, AdrPrior, GrfSampler};
use transducer_core::spectral::{dft_forward, dft_inverse, reconstruct, to_modes};
use transducer_core::training::{
    encode_meta, episode_gradients, episode_mse, split_indices, train, AdamState, EncodedMeta, LossSpace,
    TrainConfig, TrainState,
};
use transducer_core::{Error, Grid1D, GridFunction, RngStream, Tensor};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_rows(n: usize, d: usize, rng: &mut RngStream) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.standard_normal()).collect()).unwrap()
}

fn jiggle(p: &mut TransducerParams, scale: f64, rng: &mut RngStream) {
    for t in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += scale * rng.standard_normal());
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c01_gradient_integrity() {
    let start = Instant::now();
    let enc = Encoding::fourier(3, 16).unwrap();
    let cfg = ModelConfig {
        depth: 2,
        heads: 2,
        head_dim: 4,
        value_dim: 3,
        in_dim: enc.dim(),
        out_dim: enc.dim(),
        mlp_dim: 5,
        ..ModelConfig::adr(2, 6)
    };
    let grid = Grid1D::new(16).unwrap();
    let sampler = GrfSampler::new(grid, 0.2).unwrap();
    let mut rng = RngStream::new(5, 0);
    let coeffs = AdrPrior::default().sample(&sampler, &mut rng);
    let pairs: Vec<(GridFunction, GridFunction)> = (0..5)
        .map(|_| {
            let v = sampler.sample(&mut rng);
            let u = adr_solve(&v, &coeffs, 0.1, &SolverOptions::default()).unwrap();
            (v, u)
        })
        .collect();
    let meta = MetaDataset::new(
        vec![transducer_core::pde::OperatorDataset::new(pairs).unwrap()],
        GenerationConfig::desk(0),
    )
    .unwrap();
    let em = encode_meta(&meta, enc, enc).unwrap();
    let ep = em.operators[0].episode(&[0, 1, 2], &[3, 4]).unwrap();
    let syn = enc.synthesis(16).unwrap();

    let mut params = init_params(&cfg, &mut rng).unwrap();
    jiggle(&mut params, 0.2, &mut rng);
    let (_, grads) = episode_gradients(&params, &cfg, &ep, LossSpace::Grid, Some(&syn)).unwrap();
    let loss = |p: &TransducerParams| episode_mse(p, &cfg, &ep, LossSpace::Grid, Some(&syn)).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (s, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = params.clone();
            plus.iter_mut().nth(s).unwrap().data_mut()[k] += h;
            let mut minus = params.clone();
            minus.iter_mut().nth(s).unwrap().data_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = g.data()[k];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-8 {
                continue;
            }
            worst = worst.max((fd - an).abs() / scale);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient integrity",
        worst < 1e-4 && secs < 10.0,
        &format!("max relative error {worst:.2e} over {checked} parameters, {secs:.2} s"),
    );
}

#[test]
fn c02_pde_oracle() {
    let g = Grid1D::new(101).unwrap();
    let d0 = 0.002;
    let flat = |x: f64| GridFunction::from_fn(g, move |_| x);
    let coeffs = AdrCoefficients {
        delta: flat(d0),
        nu: flat(0.0),
        k_reaction: 0.0,
    };
    let v0 = GridFunction::from_fn(g, |x| if x == 1.0 { 0.0 } else { (PI * x).sin() });
    let run = |dt: f64| {
        let opts = SolverOptions {
            dt,
            stabilize: false,
            max_abs: 1e2,
        };
        adr_solve(&v0, &coeffs, 1.0, &opts).unwrap()
    };
    let decay = (-d0 * PI * PI).exp();
    let analytic_err = g
        .points()
        .zip(run(1e-3).values())
        .map(|(x, s)| ((PI * x).sin() * decay - s).abs())
        .fold(0.0, f64::max);
    // Against the exact space-discrete solution only the time error remains.
    let dx = g.spacing();
    let lambda_h = 4.0 / (dx * dx) * (PI * dx / 2.0).sin().powi(2);
    let discrete = (-d0 * lambda_h).exp();
    let time_err = |dt: f64| {
        v0.values()
            .iter()
            .zip(run(dt).values())
            .map(|(a, s)| (a * discrete - s).abs())
            .fold(0.0, f64::max)
    };
    let ratio = time_err(2e-3) / time_err(1e-3);
    report(
        2,
        "PDE oracle",
        analytic_err < 1e-3 && (1.7..=2.3).contains(&ratio),
        &format!("max error vs analytic {analytic_err:.2e}, dt halving ratio {ratio:.3}"),
    );
}

#[test]
fn c03_spectral_exactness() {
    let mut rng = RngStream::new(3, 0);
    let (mut round, mut parseval, mut proj) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let f: Vec<f64> = (0..100).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c = dft_forward(&f);
        round = round.max(max_diff(&f, &dft_inverse(&c).unwrap()));
        let e_t: f64 = f.iter().map(|x| x * x).sum();
        let e_f: f64 = c.iter().map(Complex64::norm_sqr).sum::<f64>() / 100.0;
        parseval = parseval.max((e_t - e_f).abs() / e_t);
        for m in [1, 10, 25, 50, 51] {
            let mv = to_modes(&f, m).unwrap();
            let again = to_modes(&reconstruct(&mv).unwrap(), m).unwrap();
            proj = proj.max(max_diff(mv.features(), again.features()));
        }
    }
    report(
        3,
        "spectral exactness",
        round < 1e-10 && parseval < 1e-9 && proj < 1e-12,
        &format!("round trip {round:.1e}, Parseval {parseval:.1e}, projection {proj:.1e}"),
    );
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn c04_architecture_invariants() {
    let kernels = [KernelVariant::ExpDot, KernelVariant::Rbf, KernelVariant::L2];
    let (mut perm_err, mut iso_err, mut sum_err) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..1000u64 {
        let mut rng = RngStream::new(trial, 40);
        let cfg = ModelConfig {
            depth: 1 + rng.index(3),
            heads: 1 + rng.index(3),
            head_dim: 1 + rng.index(5),
            value_dim: 1 + rng.index(4),
            in_dim: 1 + rng.index(6),
            out_dim: 1 + rng.index(5),
            mlp_dim: 1 + rng.index(8),
            kernel: kernels[rng.index(3)],
            temperature: None,
            tie_weights: rng.index(2) == 0,
            use_g: rng.index(2) == 0,
            exclude_self: false,
        };
        let mut p = init_params(&cfg, &mut rng).unwrap();
        jiggle(&mut p, 0.3, &mut rng);
        let (c, nq) = (1 + rng.index(12), 2 + rng.index(5));
        let cv = random_rows(c, cfg.in_dim, &mut rng);
        let cu = random_rows(c, cfg.out_dim, &mut rng);
        let qv = random_rows(nq, cfg.in_dim, &mut rng);
        let base = predict(&p, &cfg, &cv, &cu, &qv).unwrap();

        let perm = rng.permutation(c);
        let shuffled = predict(&p, &cfg, &permute_rows(&cv, &perm), &permute_rows(&cu, &perm), &qv).unwrap();
        perm_err = perm_err.max(base.max_abs_diff(&shuffled));

        // Each query alone, and the queries in reverse order.
        for j in 0..nq {
            let alone = predict(&p, &cfg, &cv, &cu, &permute_rows(&qv, &[j])).unwrap();
            iso_err = iso_err.max(max_diff(alone.data(), base.row(j)));
        }
        let rev: Vec<usize> = (0..nq).rev().collect();
        let flipped = predict(&p, &cfg, &cv, &cu, &permute_rows(&qv, &rev)).unwrap();
        iso_err = iso_err.max(permute_rows(&flipped, &rev).max_abs_diff(&base));

        for a in attention_maps(&p, &cfg, &cv, &cu, &qv).unwrap() {
            for r in 0..c + nq {
                sum_err = sum_err.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    report(
        4,
        "architecture invariants",
        perm_err < 1e-12 && iso_err < 1e-12 && sum_err < 1e-9,
        &format!("1000 trials: permutation {perm_err:.1e}, isolation {iso_err:.1e}, weight sums {sum_err:.1e}"),
    );
}

#[test]
fn c05_grf_statistics() {
    let g = Grid1D::new(100).unwrap();
    let n = g.len();
    let sampler = GrfSampler::new(g, 0.2).unwrap();
    let k = covariance_matrix(g, 0.2).unwrap();
    let draws = 10_000;
    let mut rng = RngStream::new(55, 0);
    let mut acc = vec![0.0; n * n];
    for _ in 0..draws {
        let x = sampler.sample(&mut rng);
        let x = x.values();
        for i in 0..n {
            for j in i..n {
                acc[i * n + j] += x[i] * x[j];
            }
        }
    }
    let mut cov_err: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            cov_err = cov_err.max((acc[i * n + j] / draws as f64 - k[i * n + j]).abs());
        }
    }
    let prior = AdrPrior::default();
    let mut violations = 0;
    for _ in 0..draws {
        let c = prior.sample(&sampler, &mut rng);
        let d = c.delta.values();
        let v = c.nu.values();
        if d.iter().any(|&x| x < 0.0) || d[0] != 0.0 || d[n - 1] != 0.0 || v[0] != 0.0 || v[n - 1] != 0.0 {
            violations += 1;
        }
        if !(0.0..=prior.reaction_max).contains(&c.k_reaction) {
            violations += 1;
        }
    }
    report(
        5,
        "GRF statistics",
        cov_err < 0.05 && violations == 0,
        &format!("covariance max error {cov_err:.4} over {draws} draws, {violations} invariant violations"),
    );
}

// Shared desk-scale setup for the regression criteria.

const MAIN_STEPS: usize = 24_000;
const MAIN_SEED: u64 = 1;
const EVAL_SEED: u64 = 7;
const CONTEXTS: [usize; 4] = [10, 20, 32, 64];

fn fourier() -> Encoding {
    Encoding::fourier(51, 100).unwrap()
}

fn train_meta() -> &'static EncodedMeta {
    static META: OnceLock<EncodedMeta> = OnceLock::new();
    META.get_or_init(|| {
        let meta = generate_meta_dataset(&GenerationConfig::desk(MAIN_SEED)).unwrap();
        encode_meta(&meta, fourier(), fourier()).unwrap()
    })
}

fn test_ops() -> &'static Vec<transducer_core::eval::PreparedOperator> {
    static OPS: OnceLock<Vec<transducer_core::eval::PreparedOperator>> = OnceLock::new();
    OPS.get_or_init(|| {
        let cfg = GenerationConfig {
            n_datasets: 32,
            pairs: 100,
            split: Split::MetaTest,
            ..GenerationConfig::desk(2)
        };
        prepare_meta(&generate_meta_dataset(&cfg).unwrap(), &fourier(), &fourier()).unwrap()
    })
}

fn adr_model(depth: usize, heads: usize, kernel: KernelVariant, tie: bool) -> ModelConfig {
    ModelConfig {
        heads,
        kernel,
        tie_weights: tie,
        use_g: false,
        ..ModelConfig::adr(depth, fourier().dim())
    }
}

fn train_adr(cfg: &ModelConfig, steps: usize, seed: u64) -> (TrainedModel, TrainState, f64) {
    let tc = TrainConfig {
        steps,
        lr: 1e-3,
        context_range: (20, 32),
        seed,
        ..Default::default()
    };
    let start = Instant::now();
    let st = train(train_meta(), cfg, &tc, TrainState::fresh(cfg, seed).unwrap(), |_| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let model = TrainedModel {
        config: cfg.clone(),
        params: st.params.clone(),
        input: fourier(),
        output: fourier(),
    };
    (model, st, secs)
}

struct MainRun {
    model: TrainedModel,
    seconds: f64,
}

fn main_model() -> &'static MainRun {
    static RUN: OnceLock<MainRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = adr_model(4, 8, KernelVariant::ExpDot, false);
        let (model, _, seconds) = train_adr(&cfg, MAIN_STEPS, MAIN_SEED);
        MainRun { model, seconds }
    })
}

fn sweep(r: &Regressor) -> Vec<RegressionReport> {
    CONTEXTS.iter().map(|&n| evaluate(r, test_ops(), n, 10, EVAL_SEED).unwrap()).collect()
}

fn main_reports() -> &'static [Vec<RegressionReport>; 3] {
    static REPORTS: OnceLock<[Vec<RegressionReport>; 3]> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let run = main_model();
        let out = [
            sweep(&Regressor::Transducer(&run.model)),
            sweep(&Regressor::Knn {
                k: 1,
                space: BaselineSpace::Grid,
            }),
            sweep(&Regressor::Ridge {
                lambda: 1e-3,
                gamma: None,
                space: BaselineSpace::Grid,
            }),
        ];
        for reps in &out {
            for r in reps {
                println!(
                    "  {:<10} n={:<3} mean rmse {:.3e} +- {:.2e}  median {:.3e}  mse {:.3e}",
                    r.regressor, r.context, r.mean_rmse, r.ci_rmse, r.median_rmse, r.mean_mse
                );
            }
        }
        out
    })
}

fn at(reps: &[RegressionReport], n: usize) -> &RegressionReport {
    reps.iter().find(|r| r.context == n).unwrap()
}

#[test]
#[ignore = "meta-trains the main model"]
fn c06_adr_regression_trend() {
    let run = main_model();
    let [tr, knn, ridge] = main_reports();
    let t20 = at(tr, 20).mean_rmse;
    let absolute = t20 < 5e-2;
    let below_knn = t20 < at(knn, 20).mean_rmse;
    let below_ridge = t20 < at(ridge, 20).mean_rmse;
    let monotone = [10, 20, 32].windows(2).all(|w| {
        let (a, b) = (at(tr, w[0]), at(tr, w[1]));
        b.mean_rmse <= a.mean_rmse || b.mean_rmse - b.ci_rmse <= a.mean_rmse + a.ci_rmse
    });
    let in_budget = run.seconds <= 1800.0;
    report(
        6,
        "ADR regression trend",
        absolute && below_knn && below_ridge && monotone && in_budget,
        &format!(
            "n=20 transducer {t20:.3e} (< 5e-2: {absolute}), knn {:.3e} (below: {below_knn}), ridge {:.3e} (below: {below_ridge}); monotone within CI: {monotone}; trained in {:.0} s",
            at(knn, 20).mean_rmse,
            at(ridge, 20).mean_rmse,
            run.seconds
        ),
    );
}

#[test]
#[ignore = "meta-trains the main model"]
fn c07_cardinality_generalization() {
    let tr = &main_reports()[0];
    let (r32, r64) = (at(tr, 32).mean_rmse, at(tr, 64).mean_rmse);
    report(
        7,
        "cardinality generalization",
        r64 <= 1.5 * r32,
        &format!("RMSE(64) {r64:.3e} vs RMSE(32) {r32:.3e}, ratio {:.2}", r64 / r32),
    );
}

const DEPTH_STEPS: usize = 2000;

/// Mean squared error on a fixed episode of every training operator.
fn training_loss(model: &TrainedModel) -> f64 {
    let meta = train_meta();
    let syn = fourier().synthesis(100).unwrap();
    let mut total = 0.0;
    for (d, op) in meta.operators.iter().enumerate() {
        let mut rng = RngStream::new(99, 0).derive(d as u64);
        let (c, q) = split_indices(op.len(), 24, op.len() - 24, &mut rng).unwrap();
        let ep = op.episode(&c, &q).unwrap();
        total += episode_mse(&model.params, &model.config, &ep, LossSpace::Grid, Some(&syn)).unwrap();
    }
    total / meta.operators.len() as f64
}

fn median3(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
#[ignore = "meta-trains nine small models"]
fn c08_depth_trend() {
    let variants = [("L=4 untied", 4, false), ("L=4 tied", 4, true), ("L=1", 1, false)];
    let mut medians = Vec::new();
    for (name, depth, tie) in variants {
        let cfg = adr_model(depth, 4, KernelVariant::ExpDot, tie);
        let losses: Vec<f64> = (1..=3).map(|s| training_loss(&train_adr(&cfg, DEPTH_STEPS, s).0)).collect();
        println!("  {name}: final training losses {losses:?}");
        medians.push(median3(losses));
    }
    report(
        8,
        "depth trend",
        medians[0] <= medians[1] && medians[1] <= medians[2],
        &format!(
            "median final training loss over 3 seeds at {DEPTH_STEPS} steps: untied {:.4e}, tied {:.4e}, L=1 {:.4e}",
            medians[0], medians[1], medians[2]
        ),
    );
}

#[test]
#[ignore = "meta-trains the main model"]
fn c09_outlier_detection() {
    let model = &main_model().model;
    let (mut tp, mut fp, mut missed) = (0usize, 0usize, 0usize);
    let mut quiet_controls = 0;
    let mut lines = Vec::new();
    for s in 0..5u64 {
        let one = |seed: u64, t: f64| {
            let cfg = GenerationConfig {
                n_datasets: 1,
                pairs: 64,
                t,
                split: Split::MetaTest,
                ..GenerationConfig::desk(seed)
            };
            generate_meta_dataset(&cfg).unwrap().datasets.remove(0)
        };
        let clean = one(100 + s, 1.0);
        let source = one(200 + s, 0.5);
        let (mixed, labels) = contaminate(&clean, &source, 0.05, &mut RngStream::new(s, 7)).unwrap();
        let r = outlier_detect(model, &mixed, 500, 0.5, OutlierScore::Rmse, s, Some(&labels)).unwrap();
        let control = outlier_detect(model, &clean, 500, 0.5, OutlierScore::Rmse, s, None).unwrap();
        let truth: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        tp += r.flagged.iter().filter(|&&i| labels[i]).count();
        fp += r.flagged.iter().filter(|&&i| !labels[i]).count();
        missed += truth.iter().filter(|i| !r.flagged.contains(i)).count();
        if control.flagged.len() <= 1 {
            quiet_controls += 1;
        }
        lines.push(format!(
            "  seed {s}: outliers {truth:?}, flagged {:?}, clean control flagged {:?}",
            r.flagged, control.flagged
        ));
    }
    for l in &lines {
        println!("{l}");
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + missed) as f64;
    report(
        9,
        "outlier detection",
        precision >= 0.9 && recall >= 0.9 && quiet_controls >= 4,
        &format!("pooled over 5 seeds: precision {precision:.3}, recall {recall:.3}; {quiet_controls}/5 clean controls flag <= 1"),
    );
}

const KERNEL_STEPS: usize = 4000;

#[test]
#[ignore = "meta-trains three small models"]
fn c10_kernel_variants() {
    let mut rmse = Vec::new();
    for kernel in [KernelVariant::ExpDot, KernelVariant::Rbf, KernelVariant::L2] {
        let (model, _, _) = train_adr(&adr_model(4, 4, kernel, false), KERNEL_STEPS, MAIN_SEED);
        let reps = sweep(&Regressor::Transducer(&model));
        println!(
            "  {kernel:?}: {}",
            reps.iter().map(|r| format!("n={} {:.3e}", r.context, r.mean_rmse)).collect::<Vec<_>>().join(", ")
        );
        rmse.push((at(&reps, 20).mean_rmse, at(&reps, 32).mean_rmse, at(&reps, 64).mean_rmse));
    }
    let ratio = rmse[0].0.max(rmse[1].0) / rmse[0].0.min(rmse[1].0);
    let (l2_32, l2_64) = (rmse[2].1, rmse[2].2);
    report(
        10,
        "kernel variants",
        ratio <= 3.0 && l2_64 > l2_32,
        &format!(
            "exp_dot/rbf RMSE ratio at n=20 {ratio:.2}; l2 RMSE(64) {l2_64:.3e} vs RMSE(32) {l2_32:.3e}"
        ),
    );
}

fn brute_nearest(ctx: &Tensor, q: &[f64]) -> usize {
    let (n, _) = ctx.dims2().unwrap();
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let d: f64 = ctx.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[test]
fn c11_oracle_equivalences() {
    let mut rng = RngStream::new(11, 0);
    let mut knn_mismatch = 0;
    for trial in 0..1000 {
        let (n, d) = (1 + rng.index(40), 1 + rng.index(10));
        let mut cv = random_rows(n, d, &mut rng);
        if trial % 4 == 0 && n > 1 {
            // Duplicate rows exercise the tie rule.
            let r = cv.row(0).to_vec();
            cv.data_mut()[(n - 1) * d..].copy_from_slice(&r);
        }
        let cu = random_rows(n, 3, &mut rng);
        let q: Vec<f64> = if trial % 4 == 0 {
            cv.row(0).to_vec()
        } else {
            (0..d).map(|_| rng.standard_normal()).collect()
        };
        let got = knn_regress(&cv, &cu, &q, 1).unwrap();
        if got != cu.row(brute_nearest(&cv, &q)) {
            knn_mismatch += 1;
        }
    }

    let grid = Grid1D::new(100).unwrap();
    let sampler = GrfSampler::new(grid, 0.2).unwrap();
    let mut worst_residual: f64 = 0.0;
    for _ in 0..200 {
        let n = 2 + rng.index(63);
        let rows = |rng: &mut RngStream| {
            let r: Vec<GridFunction> = (0..n).map(|_| sampler.sample(rng)).collect();
            Tensor::from_rows(&r.iter().map(|f| f.values()).collect::<Vec<_>>()).unwrap()
        };
        let (cv, cu) = (rows(&mut rng), rows(&mut rng));
        let qv = random_rows(3, 100, &mut rng);
        let fit = ridge_rbf_regress(&cv, &cu, &qv, 1e-3, None).unwrap();
        worst_residual = worst_residual.max(fit.residual);
    }

    // One head, one layer, identity projections and no feed-forward update,
    // so each query output is sum_k softmax_k(q . v_k / tau) u_k.
    let cfg = ModelConfig {
        depth: 1,
        heads: 1,
        head_dim: 3,
        value_dim: 2,
        in_dim: 3,
        out_dim: 2,
        mlp_dim: 2,
        kernel: KernelVariant::ExpDot,
        temperature: Some(1.5),
        tie_weights: false,
        use_g: false,
        exclude_self: false,
    };
    let mut p = init_params(&cfg, &mut rng).unwrap();
    let l = &mut p.layers[0];
    l.f.w2 = Tensor::zeros(l.f.w2.shape());
    l.f.b2 = Tensor::zeros(l.f.b2.shape());
    l.heads[0].q = Tensor::eye(3);
    l.heads[0].k = Tensor::eye(3);
    l.heads[0].v = Tensor::eye(2);
    l.w = Tensor::eye(2);
    let ctx_v = [[0.2, -0.4, 1.0], [1.1, 0.3, -0.5], [-0.7, 0.8, 0.1]];
    let ctx_u = [[1.0, -2.0], [0.5, 0.25], [-1.5, 3.0]];
    let queries = [[0.3, 0.3, 0.3], [-1.0, 0.5, 2.0]];
    let out = predict(
        &p,
        &cfg,
        &Tensor::from_rows(&ctx_v).unwrap(),
        &Tensor::from_rows(&ctx_u).unwrap(),
        &Tensor::from_rows(&queries).unwrap(),
    )
    .unwrap();
    let mut attn_err: f64 = 0.0;
    for (j, q) in queries.iter().enumerate() {
        let s: Vec<f64> = ctx_v
            .iter()
            .map(|k| ((q[0] * k[0] + q[1] * k[1] + q[2] * k[2]) / 1.5).exp())
            .collect();
        let z: f64 = s.iter().sum();
        for c in 0..2 {
            let want: f64 = (0..3).map(|k| s[k] / z * ctx_u[k][c]).sum();
            attn_err = attn_err.max((out.row(j)[c] - want).abs());
        }
    }
    report(
        11,
        "oracle equivalences",
        knn_mismatch == 0 && worst_residual < 1e-8 && attn_err < 1e-12,
        &format!(
            "k-NN mismatches {knn_mismatch}/1000, worst ridge residual {worst_residual:.1e}, attention vs scalar oracle {attn_err:.1e}"
        ),
    );
}

#[test]
fn c12_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenerationConfig {
        n_datasets: 3,
        pairs: 4,
        grid: 20,
        ..GenerationConfig::desk(12)
    };
    let meta = generate_meta_dataset(&gen).unwrap();
    let bytes = encode_meta_dataset(&meta).unwrap();
    let path = dir.path().join("meta.tdxd");
    save_meta_dataset(&path, &meta).unwrap();
    let file_ok = std::fs::read(&path).unwrap() == bytes;
    let back = decode_datasets(&bytes).unwrap();
    let dataset_ok = encode_datasets(&back.datasets, back.header.generation.as_ref()).unwrap() == bytes
        && back.into_meta().unwrap() == meta;

    let enc = Encoding::fourier(5, 20).unwrap();
    let config = ModelConfig {
        heads: 3,
        ..ModelConfig::adr(2, enc.dim())
    };
    let mut rng = RngStream::new(12, 0);
    let mut params = init_params(&config, &mut rng).unwrap();
    jiggle(&mut params, 0.1, &mut rng);
    let mut adam = AdamState::new(params.iter());
    adam.t = 3;
    adam.v.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x = rng.uniform(0.0, 1.0)));
    let ck = Checkpoint {
        config: config.clone(),
        input: enc,
        output: enc,
        params: params.clone(),
        provenance: TrainingProvenance {
            steps: 3,
            final_loss: 0.5,
            seed: 12,
            train_config: Some(TrainConfig::default()),
            meta_dataset: Some(gen),
        },
        adam: Some(adam),
    };
    let ck_bytes = encode_checkpoint(&ck).unwrap();
    let ck_path = dir.path().join("model.tdxc");
    save_checkpoint(&ck_path, &ck).unwrap();
    let loaded = load_checkpoint(&ck_path).unwrap();
    let checkpoint_ok = std::fs::read(&ck_path).unwrap() == ck_bytes
        && encode_checkpoint(&decode_checkpoint(&ck_bytes).unwrap()).unwrap() == ck_bytes
        && loaded == ck;
    let (cv, cu, qv) = (
        random_rows(6, enc.dim(), &mut rng),
        random_rows(6, enc.dim(), &mut rng),
        random_rows(4, enc.dim(), &mut rng),
    );
    let forward_err = predict(&params, &config, &cv, &cu, &qv)
        .unwrap()
        .max_abs_diff(&predict(&loaded.params, &loaded.config, &cv, &cu, &qv).unwrap());

    let img = IdxFile::new(vec![5, 3, 3], (0..45).collect()).unwrap();
    let img_bytes = img.to_bytes();
    let idx_ok = IdxFile::from_bytes(&img_bytes, Some(IDX_IMAGES)).unwrap().to_bytes() == img_bytes;
    let mut corrupt = img_bytes.clone();
    corrupt[2] = 0x0d;
    let positional = matches!(
        IdxFile::from_bytes(&corrupt, None),
        Err(Error::Format { offset: 0, ref message }) if message.contains("magic")
    ) && matches!(
        IdxFile::from_bytes(&img_bytes, Some(IDX_LABELS)),
        Err(Error::Format { offset: 0, .. })
    );
    report(
        12,
        "persistence",
        file_ok && dataset_ok && checkpoint_ok && forward_err < 1e-12 && idx_ok && positional,
        &format!(
            "dataset bytes {}, checkpoint bytes {}, IDX bytes {idx_ok}, forward difference {forward_err:.1e}, corrupted magic gives positional error {positional}",
            file_ok && dataset_ok,
            checkpoint_ok
        ),
    );
}

fn digits(prefix: &str) -> LabeledImages {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/digits");
    let images = IdxFile::read(&dir.join(format!("{prefix}-images-idx3-ubyte")), Some(IDX_IMAGES)).unwrap();
    let labels = IdxFile::read(&dir.join(format!("{prefix}-labels-idx1-ubyte")), Some(IDX_LABELS)).unwrap();
    LabeledImages::from_idx(&images, &labels, 10).unwrap()
}

const DIGIT_STEPS: usize = 3000;

#[test]
#[ignore = "meta-trains the digit classifier"]
fn c13_finite_dimensional_mode() {
    let (train_set, test_set) = (digits("train"), digits("test"));
    let cfg = finite::classifier_config(train_set.dim(), 10);
    let tc = TrainConfig {
        steps: DIGIT_STEPS,
        lr: 1e-3,
        context_range: (30, 60),
        query_count: 20,
        loss_space: LossSpace::Mode,
        seed: 13,
        ..Default::default()
    };
    let start = Instant::now();
    let st = finite::train(&train_set, &cfg, &tc, TrainState::fresh(&cfg, 13).unwrap(), |_| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let model = finite::trained(cfg, st.params);
    let identity = Permutation::identity(train_set.dim(), 10);
    let acc = finite::evaluate(&model, &train_set, &test_set, &identity, 50, 50, 20, 13).unwrap();
    report(
        13,
        "finite-dimensional mode",
        acc.accuracy >= 0.30 && secs <= 900.0,
        &format!(
            "identity-permutation accuracy {:.3} over {} episodes (chance 0.1; full-scale reference 0.8183), trained {DIGIT_STEPS} steps in {secs:.0} s",
            acc.accuracy, acc.episodes
        ),
    );
}
