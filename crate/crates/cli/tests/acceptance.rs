//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndgrad::gradcheck::{check_inputs, check_params};
use ndgrad::nn::{self, EncoderLayer, Linear, Norm};
use ndgrad::{GradError, Graph, ParamId, ParamStore, Tensor, Var};
use nnsl::datapipe::{
    build_descriptors, drop_with_absorption, hist_diff, histogram, impute_unit_gaps,
    make_training_examples, BuildOptions, CachedStore, ContextSequence, HistogramDelta, LossStore,
    MemoryLossStore, Representation, TokenProbVector, Trajectory, Variant,
};
use nnsl::encoders::{
    average_encode, cnn_encode, histdiff_encode, EncoderConfig, EncoderIds, EncoderKind, Init,
    LinearIds,
};
use nnsl::evalharness::{
    calibration_coverage, evaluate, final_forecasts, ranking_accuracy, EvalReport, FinalForecast,
    LogisticPredictor, NeuralPredictor, PairingRule,
};
use nnsl::forecaster::{
    embed_context, pinball_loss, train, ContextIds, Forecaster, ModelConfig, RunConfig, TrainSet,
    QUANTILES,
};
use nnsl::logfit::{fit_logistic, logistic_jacobian, logistic_predict, LogisticParams};
use nnsl::synthgen::{CorpusConfig, Family, SplitKind, SyntheticCorpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const FD_STEP: f64 = 1e-5;
const KERNEL_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const PINBALL_DRAWS: usize = 10_000;
const PINBALL_TOL: f64 = 1e-12;

const LOGFIT_EXACT_TOL: f64 = 1e-6;
const LOGFIT_NOISY_MAE: f64 = 1e-2 * 1.5;
const LOGFIT_JACOBIAN_TOL: f64 = 1e-6;
const LOGFIT_BUDGET: Duration = Duration::from_secs(10);

const INVARIANT_SEEDS: u64 = 1000;
const HIST_TOL: f64 = 1e-12;

const BENCH_RUNS: usize = 2000;
const BENCH_TOKENS: usize = 4096;
const BENCH_EPOCHS: usize = 3;
const BENCH_EXAMPLES_PER_RUN: usize = 24;
const BENCH_FRACTION: f64 = 0.2;
const BENCH_SEED: u64 = 0;
const BENCH_BUDGET: Duration = Duration::from_secs(45 * 60);
const INVERSE_RATIO: f64 = 0.8;
const COVERAGE_BAND: (f64, f64) = (0.60, 0.95);

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_criterion(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2} {name} [{secs:.1}s]: {detail}");
    verdict.is_ok()
}

// ---------------------------------------------------------------- gradients

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> ndgrad::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = rand_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn grad_err(e: nnsl::Error) -> GradError {
    GradError::InvalidArgument(e.to_string())
}

/// Worst relative error of a kernel over every seed, with random inputs.
fn kernel_err(
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<'_>, &[Var]) -> ndgrad::Result<Var> + Copy,
) -> f64 {
    (0..GRAD_SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            check_inputs(&inputs, FD_STEP, 200, |g, v| {
                let out = f(g, v)?;
                project(g, out, seed)
            })
            .unwrap()
            .max_rel_err
        })
        .fold(0.0, f64::max)
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn attention_err() -> f64 {
    let (d, ffn) = (8, 12);
    (0..GRAD_SEEDS)
        .map(|seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut add = |store: &mut ParamStore, name: &str, shape: &[usize], offset: f64| {
                let mut t = rand_tensor(&mut rng, shape);
                t.data_mut().iter_mut().for_each(|v| *v = offset + 0.5 * *v);
                store.insert(name, t).unwrap()
            };
            let mut ids = vec![
                add(&mut store, "n1.g", &[d], 1.0),
                add(&mut store, "n1.b", &[d], 0.0),
            ];
            for p in ["q", "k", "v", "o"] {
                ids.push(add(&mut store, &format!("{p}.w"), &[d, d], 0.0));
                ids.push(add(&mut store, &format!("{p}.b"), &[d], 0.0));
            }
            ids.push(add(&mut store, "n2.g", &[d], 1.0));
            ids.push(add(&mut store, "n2.b", &[d], 0.0));
            ids.push(add(&mut store, "f1.w", &[d, ffn], 0.0));
            ids.push(add(&mut store, "f1.b", &[ffn], 0.0));
            ids.push(add(&mut store, "f2.w", &[ffn, d], 0.0));
            ids.push(add(&mut store, "f2.b", &[d], 0.0));
            let x = add(&mut store, "x", &[5, d], 0.0);
            check_params(&store, FD_STEP, 40, |g, _| {
                let v: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let lin = |i: usize| Linear {
                    weight: v[i],
                    bias: v[i + 1],
                };
                let layer = EncoderLayer {
                    attn_norm: Norm {
                        gain: v[0],
                        shift: v[1],
                    },
                    query: lin(2),
                    key: lin(4),
                    value: lin(6),
                    output: lin(8),
                    ffn_norm: Norm {
                        gain: v[10],
                        shift: v[11],
                    },
                    ffn_in: lin(12),
                    ffn_out: lin(14),
                };
                let xv = g.param(x);
                let y = nn::attention_block(g, xv, &layer, 2, true)?;
                project(g, y, seed)
            })
            .unwrap()
            .max_rel_err
        })
        .fold(0.0, f64::max)
}

fn context_embedding_err() -> f64 {
    let d = 8;
    (0..GRAD_SEEDS)
        .map(|seed| {
            let mut store = ParamStore::new();
            let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
            let ids = ContextIds {
                accuracy: LinearIds::create(&mut store, &mut init, "y", 1, d / 2).unwrap(),
                gap: LinearIds::create(&mut store, &mut init, "g", 1, d / 2).unwrap(),
            };
            randomize(&mut store, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let y = store
                .insert(
                    "acc",
                    Tensor::new(
                        vec![4, 1],
                        (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let gap = store
                .insert(
                    "gap",
                    Tensor::new(
                        vec![4, 1],
                        (0..4).map(|_| rng.random_range(1.0..12.0)).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            check_params(&store, FD_STEP, 40, |g, _| {
                let (yv, gv) = (g.param(y), g.param(gap));
                let c = embed_context(g, &ids, yv, gv).map_err(grad_err)?;
                project(g, c, seed)
            })
            .unwrap()
            .max_rel_err
        })
        .fold(0.0, f64::max)
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_len: 40,
        bins: 8,
        channels: vec![3, 4],
        kernel: 4,
        stride: 3,
        padding: 2,
    }
}

fn encoder_err(kind: EncoderKind, input: &[usize]) -> f64 {
    (0..GRAD_SEEDS)
        .map(|seed| {
            let mut store = ParamStore::new();
            let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
            let ids = EncoderIds::create(kind, &small_encoder(), 5, &mut store, &mut init).unwrap();
            randomize(&mut store, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let n: usize = input.iter().product();
            let x = store
                .insert(
                    "x",
                    Tensor::new(
                        input.to_vec(),
                        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            check_params(&store, FD_STEP, 60, |g, _| {
                let xv = g.param(x);
                let e = match &ids {
                    EncoderIds::Cnn(c) => cnn_encode(g, c, xv),
                    EncoderIds::Average(a) => average_encode(g, a, xv),
                    EncoderIds::HistDiff(h) => histdiff_encode(g, h, xv),
                    EncoderIds::None => unreachable!(),
                }
                .map_err(grad_err)?;
                project(g, e, seed)
            })
            .unwrap()
            .max_rel_err
        })
        .fold(0.0, f64::max)
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_dim: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        max_seq_len: 64,
        encoder: EncoderConfig {
            input_len: 48,
            bins: 8,
            channels: vec![2, 4],
            kernel: 4,
            stride: 4,
            padding: 0,
        },
        quantiles: QUANTILES.to_vec(),
    }
}

fn random_rep(variant: Variant, rng: &mut ChaCha8Rng) -> Representation {
    match variant {
        Variant::NeuNeu => Representation::TokenProbs(
            TokenProbVector::new((0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        ),
        Variant::Average => {
            Representation::AvgProbSequence((0..3).map(|_| rng.random_range(0.2..0.8)).collect())
        }
        Variant::HistDiff | Variant::DiffProbe => {
            let now: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let fut: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let (sn, sf) = (now.iter().sum::<f64>(), fut.iter().sum::<f64>());
            Representation::HistDelta(HistogramDelta {
                delta: now.iter().zip(&fut).map(|(a, b)| b / sf - a / sn).collect(),
            })
        }
        Variant::NoLoss => Representation::None,
    }
}

fn end_to_end_err() -> f64 {
    let mut worst: f64 = 0.0;
    for variant in Variant::ALL {
        for seed in 0..GRAD_SEEDS {
            let mut model = Forecaster::new(tiny_model(variant), seed).unwrap();
            randomize(model.params_mut(), seed + 1000, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = random_rep(variant, &mut rng);
            let ctx = ContextSequence::new(vec![(0.3, 1), (0.35, 2), (0.5, 3)]).unwrap();
            let target = rng.random_range(0.0..1.0);
            let report = check_params(model.params(), FD_STEP, 12, |g, _| {
                let q = model.forward_graph(g, &ctx, &rep).map_err(grad_err)?;
                g.pinball(q, target, &QUANTILES)
            })
            .unwrap();
            worst = worst.max(report.max_rel_err);
        }
    }
    worst
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let kernels = [
        (
            "conv1d",
            kernel_err(&[&[2, 23], &[3, 2, 5], &[3]], |g, v| {
                g.conv1d(v[0], v[1], v[2], 3, 2)
            }),
        ),
        (
            "gelu",
            kernel_err(&[&[4, 7]], |g, v| {
                let x = g.scale(v[0], 3.0);
                Ok(g.gelu(x))
            }),
        ),
        (
            "group_norm",
            kernel_err(&[&[8, 9], &[8], &[8]], |g, v| {
                g.group_norm(v[0], 4, v[1], v[2], 1e-5)
            }),
        ),
        (
            "layer_norm",
            kernel_err(&[&[3, 10], &[10], &[10]], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "rope",
            kernel_err(&[&[2, 5, 8]], |g, v| g.rope(v[0], &[0, 1, 2, 3, 4])),
        ),
        ("attention_block", attention_err()),
        ("context_embedding", context_embedding_err()),
        ("cnn_encoder", encoder_err(EncoderKind::Cnn, &[1, 40])),
        (
            "average_encoder",
            encoder_err(EncoderKind::Average, &[4, 1]),
        ),
        ("histdiff_encoder", encoder_err(EncoderKind::HistDiff, &[8])),
    ];
    let e2e = end_to_end_err();
    let elapsed = start.elapsed();
    let (worst_name, worst) = kernels.iter().fold(
        ("", 0.0),
        |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc },
    );
    let bad: Vec<&str> = kernels
        .iter()
        .filter(|(_, e)| *e > KERNEL_TOL)
        .map(|(n, _)| *n)
        .collect();
    check(
        bad.is_empty() && e2e <= END_TO_END_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{} kernels x {GRAD_SEEDS} seeds, worst {worst:.2e} ({worst_name}) <= {KERNEL_TOL:.0e}; \
             pinball∘forward over 5 variants {e2e:.2e} <= {END_TO_END_TOL:.0e}; {:.1}s < {}s{}",
            kernels.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if bad.is_empty() { String::new() } else { format!("; failing: {bad:?}") }
        ),
    )
}

// ------------------------------------------------------------------- shapes

fn closed_form_lengths(input: usize, layers: usize, k: usize, s: usize, p: usize) -> Vec<usize> {
    let mut l = input;
    (0..layers)
        .map(|_| {
            l = (l + 2 * p - k) / s + 1;
            l
        })
        .collect()
}

fn shape_oracle() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, cfg, want, flat) in [
        ("full", EncoderConfig::full(), vec![16001, 1001, 63, 4], 256),
        ("desk", EncoderConfig::desk(), vec![257, 17, 2, 1], 64),
    ] {
        let formula = closed_form_lengths(
            cfg.input_len,
            cfg.channels.len(),
            cfg.kernel,
            cfg.stride,
            cfg.padding,
        );
        let got = cfg.conv_lengths().unwrap();
        let got_flat = cfg.flatten_dim().unwrap();
        // the encoder must also run end to end at this geometry
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
        let ids = EncoderIds::create(EncoderKind::Cnn, &cfg, 8, &mut store, &mut init).unwrap();
        let EncoderIds::Cnn(c) = &ids else {
            unreachable!()
        };
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[1, cfg.input_len], 0.5));
        let runs = cnn_encode(&mut g, c, x)
            .map(|e| g.shape(e) == [8])
            .unwrap_or(false);
        ok &= got == want
            && formula == want
            && got_flat == flat
            && flat == cfg.channels[3] * want[3]
            && runs;
        details.push(format!(
            "{name} {} -> {got:?} flatten {got_flat}",
            cfg.input_len
        ));
    }
    check(ok, details.join("; "))
}

// ------------------------------------------------------------------ pinball

fn pinball_direct(raw: &[f64], a: f64, taus: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..raw.len() {
        let u = a - raw[i];
        total += if u >= 0.0 {
            taus[i] * u
        } else {
            (taus[i] - 1.0) * u
        };
    }
    total
}

fn pinball_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..PINBALL_DRAWS {
        let a = rng.random_range(0.0..1.0);
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..1.5)).collect();
        let direct = pinball_direct(&raw, a, &QUANTILES);
        worst = worst.max((pinball_loss(&raw, a, &QUANTILES) - direct).abs());
        worst = worst.max((ndgrad::kernels::pinball(&raw, a, &QUANTILES) - direct).abs());
    }
    let example = pinball_loss(&[0.4, 0.45, 0.5, 0.55, 0.6], 0.5, &QUANTILES);
    check(
        worst <= PINBALL_TOL && (example - 0.045).abs() <= PINBALL_TOL,
        format!("{PINBALL_DRAWS} draws, max |diff| {worst:.1e} <= {PINBALL_TOL:.0e}; worked example {example:.15}"),
    )
}

// ----------------------------------------------------------------- logistic

fn logistic_recovery() -> Verdict {
    let start = Instant::now();
    let sigmoid_curve = |p: &LogisticParams, l: f64| p.a / (1.0 + (-p.k * (l - p.l0)).exp()) + p.b;
    let truth = LogisticParams {
        a: 0.55,
        k: -3.0,
        l0: 2.8,
        b: 0.22,
    };
    let (lo, hi) = (1.8, 3.8);
    let xs: Vec<f64> = (0..50).map(|i| lo + (hi - lo) * i as f64 / 49.0).collect();
    let clean: Vec<(f64, f64)> = xs.iter().map(|&l| (l, sigmoid_curve(&truth, l))).collect();
    let fit = fit_logistic(&clean, 0).unwrap();
    let dense = (0..=1000).map(|i| lo + (hi - lo) * i as f64 / 1000.0);
    let exact_err = dense
        .map(|l| (logistic_predict(&fit.params, l) - sigmoid_curve(&truth, l)).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let noisy: Vec<(f64, f64)> = clean
        .iter()
        .map(|&(l, y)| (l, y + noise.sample(&mut rng)))
        .collect();
    let noisy_fit = fit_logistic(&noisy, 0).unwrap();
    let noisy_mae = clean
        .iter()
        .map(|&(l, y)| (logistic_predict(&noisy_fit.params, l) - y).abs())
        .sum::<f64>()
        / clean.len() as f64;

    let mut jac_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p = LogisticParams {
            a: rng.random_range(-1.0..1.0),
            k: rng.random_range(-5.0..5.0),
            l0: rng.random_range(1.0..4.0),
            b: rng.random_range(-0.5..0.5),
        };
        let l = rng.random_range(1.0..4.0);
        let j = logistic_jacobian(&p, l);
        let h = 1e-4;
        for i in 0..4 {
            let f = |d: f64| {
                let mut v = [p.a, p.k, p.l0, p.b];
                v[i] += d;
                sigmoid_curve(
                    &LogisticParams {
                        a: v[0],
                        k: v[1],
                        l0: v[2],
                        b: v[3],
                    },
                    l,
                )
            };
            let num = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
            jac_err = jac_err.max((j[i] - num).abs() / j[i].abs().max(num.abs()).max(1e-4));
        }
    }
    let elapsed = start.elapsed();
    check(
        exact_err <= LOGFIT_EXACT_TOL
            && noisy_mae <= LOGFIT_NOISY_MAE
            && jac_err <= LOGFIT_JACOBIAN_TOL
            && elapsed < LOGFIT_BUDGET,
        format!(
            "noiseless max err {exact_err:.1e} <= {LOGFIT_EXACT_TOL:.0e}; sigma 0.01 MAE {noisy_mae:.4} <= \
             {LOGFIT_NOISY_MAE}; Jacobian rel err {jac_err:.1e} <= {LOGFIT_JACOBIAN_TOL:.0e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------ augmentation

struct Recording {
    inner: MemoryLossStore,
    seen: RefCell<Vec<usize>>,
}

impl LossStore for Recording {
    fn token_probs(&self, traj: &Trajectory, checkpoint: usize) -> nnsl::Result<TokenProbVector> {
        self.seen.borrow_mut().push(checkpoint);
        self.inner.token_probs(traj, checkpoint)
    }
}

fn augmentation_invariants() -> Verdict {
    let mut failures = Vec::new();
    let mut leak_checks = 0usize;
    for seed in 0..INVARIANT_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(3..30);
        let accs: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
        let full = impute_unit_gaps(&accs).unwrap();
        let p = rng.random_range(0.0..0.95);
        let dropped = drop_with_absorption(&full, p, &mut rng).unwrap();
        let total: u32 = dropped.pairs.iter().map(|x| x.1).sum();
        if total as usize != t {
            failures.push(format!("seed {seed}: gap sum {total} != {t}"));
        }
        if dropped.pairs[0].0 != full.pairs[0].0 {
            failures.push(format!("seed {seed}: first element lost"));
        }
        if drop_with_absorption(&full, 0.0, &mut rng).unwrap() != full {
            failures.push(format!("seed {seed}: p_drop 0 changed the sequence"));
        }

        let traj = Trajectory {
            run_id: format!("r{seed}"),
            task_id: "t".into(),
            compute_unit_flops: 1.0,
            accuracies: accs,
            token_prob_files: None,
        };
        let keep = rng.random_range(1..=dropped.len());
        let mut prefix = ContextSequence {
            pairs: dropped.pairs[..keep].to_vec(),
        };
        while prefix.len() > 1 && prefix.end_checkpoint() + 1 >= t {
            prefix.pairs.pop();
        }
        if prefix.end_checkpoint() + 1 >= t {
            continue;
        }
        let anchor = prefix.end_checkpoint();
        for variant in [Variant::NeuNeu, Variant::Average, Variant::NoLoss] {
            let mut inner = MemoryLossStore::new();
            for c in 0..t {
                let probs = (0..16)
                    .map(|i| ((i * 5 + c * 3) % 16) as f64 / 15.0)
                    .collect();
                inner.insert(&traj.run_id, c, TokenProbVector::new(probs).unwrap());
            }
            let store = Recording {
                inner,
                seen: RefCell::new(Vec::new()),
            };
            make_training_examples(&prefix, &traj, variant.representation(), &store, 8).unwrap();
            if let Some(c) = store.seen.borrow().iter().find(|&&c| c > anchor) {
                failures.push(format!(
                    "seed {seed}: {variant} read checkpoint {c} past anchor {anchor}"
                ));
            }
            leak_checks += 1;
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{INVARIANT_SEEDS} seeds: gap sums conserved, first element kept, p_drop=0 identity; \
                 {leak_checks} no-future-leak checks clean"
            )
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

fn histogram_invariants() -> Verdict {
    let mut worst_sum: f64 = 0.0;
    let mut worst_delta: f64 = 0.0;
    for seed in 0..INVARIANT_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = rng.random_range(2..80);
        let n = rng.random_range(1..500);
        let draw = |rng: &mut ChaCha8Rng| {
            TokenProbVector::new(
                (0..n)
                    .map(|_| match rng.random_range(0..10) {
                        0 => 0.0,
                        1 => 1.0,
                        2 => rng.random_range(0..=bins) as f64 / bins as f64,
                        _ => rng.random_range(0.0..1.0),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let a = histogram(&draw(&mut rng), bins).unwrap();
        let b = histogram(&draw(&mut rng), bins).unwrap();
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
        worst_delta = worst_delta.max(hist_diff(&a, &b).unwrap().delta.iter().sum::<f64>().abs());
    }
    let zero = histogram(&TokenProbVector::new(vec![0.0]).unwrap(), 10).unwrap();
    let zero_in_first = zero[0] == 1.0 && zero[1..].iter().all(|&v| v == 0.0);
    check(
        worst_sum <= HIST_TOL && worst_delta <= HIST_TOL && zero_in_first,
        format!(
            "{INVARIANT_SEEDS} seeds: max |Σh-1| {worst_sum:.1e}, max |ΣΔh| {worst_delta:.1e} (<= {HIST_TOL:.0e}); \
             p=0 in bin 1: {zero_in_first}"
        ),
    )
}

// --------------------------------------------------------------- benchmark

struct Method {
    report: EvalReport,
    matched_mae: f64,
    inverse_mae: f64,
}

struct Benchmark {
    logistic: Method,
    noloss: Method,
    average: Method,
    neuneu: Method,
    heldout_runs: usize,
    matched_runs: usize,
    examples: usize,
    elapsed: Duration,
}

fn mae_where(report: &EvalReport, keep: impl Fn(&nnsl::evalharness::EvalRecord) -> bool) -> f64 {
    let errs: Vec<f64> = report
        .records
        .iter()
        .filter(|r| keep(r))
        .map(|r| r.abs_err)
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let corpus = SyntheticCorpus::generate(&CorpusConfig {
        runs: BENCH_RUNS,
        tokens: BENCH_TOKENS,
        context_fraction: BENCH_FRACTION,
        seed: BENCH_SEED,
        ..CorpusConfig::default()
    })
    .unwrap();
    let store = CachedStore::new(&corpus);
    let pick = |split| -> Vec<usize> { corpus.split_indices(split) };
    let train_trajs: Vec<Trajectory> = pick(SplitKind::Train)
        .iter()
        .map(|&i| corpus.trajectories[i].clone())
        .collect();
    let held_idx = pick(SplitKind::Heldout);
    let held: Vec<Trajectory> = held_idx
        .iter()
        .map(|&i| corpus.trajectories[i].clone())
        .collect();
    let matched: HashSet<String> = held_idx
        .iter()
        .filter(|&&i| corpus.runs[i].matched_mean)
        .map(|&i| corpus.runs[i].run_id.clone())
        .collect();
    let summarize = |report: EvalReport| Method {
        matched_mae: mae_where(&report, |r| matched.contains(&r.run)),
        inverse_mae: mae_where(&report, |r| r.task == Family::Inverse.name()),
        report,
    };

    let mut pairs: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for t in &train_trajs {
        for c in 0..t.len() {
            pairs
                .entry(t.task_id.clone())
                .or_default()
                .push((store.mean_loss(t, c).unwrap(), t.accuracies[c]));
        }
    }
    let fits: HashMap<String, LogisticParams> = pairs
        .iter()
        .map(|(task, p)| (task.clone(), fit_logistic(p, BENCH_SEED).unwrap().params))
        .collect();
    let lp = LogisticPredictor {
        fits: &fits,
        oracle: Some(&store),
    };
    let logistic = summarize(
        EvalReport::from_records(
            "logistic",
            BENCH_FRACTION,
            evaluate(&lp, &held, BENCH_FRACTION).unwrap(),
            BENCH_SEED,
        )
        .unwrap(),
    );

    let opts = BuildOptions {
        max_per_run: Some(BENCH_EXAMPLES_PER_RUN),
        seed: BENCH_SEED,
        ..BuildOptions::default()
    };
    let descs = build_descriptors(&train_trajs, &opts).unwrap();
    let neural = |variant: Variant| {
        let mut config = RunConfig::desk(variant);
        config.train.epochs = BENCH_EPOCHS;
        let set = TrainSet {
            trajectories: &train_trajs,
            examples: &descs,
        };
        let out = train(set, &store, &config, BENCH_SEED).unwrap();
        assert!(
            out.abort.is_none(),
            "{variant} training aborted: {:?}",
            out.abort
        );
        let p = NeuralPredictor {
            model: &out.model,
            store: &store,
            oracle: None,
        };
        let records = evaluate(&p, &held, BENCH_FRACTION).unwrap();
        summarize(
            EvalReport::from_records(variant.name(), BENCH_FRACTION, records, BENCH_SEED).unwrap(),
        )
    };
    let noloss = neural(Variant::NoLoss);
    let average = neural(Variant::Average);
    let neuneu = neural(Variant::NeuNeu);
    Benchmark {
        logistic,
        noloss,
        average,
        neuneu,
        heldout_runs: held.len(),
        matched_runs: matched.len(),
        examples: descs.len(),
        elapsed: start.elapsed(),
    }
}

fn print_benchmark(b: &Benchmark) {
    println!(
        "     desk benchmark: {BENCH_RUNS} runs, {} held out ({} matched-mean), {} training examples, {:.1} min",
        b.heldout_runs,
        b.matched_runs,
        b.examples,
        b.elapsed.as_secs_f64() / 60.0
    );
    for m in [&b.logistic, &b.noloss, &b.average, &b.neuneu] {
        println!(
            "     {:9} MAE {:.4}  inverse {:.4}  matched {:.4}  coverage {:.3}  ranking {}",
            m.report.method,
            m.report.mae,
            m.inverse_mae,
            m.matched_mae,
            m.report.coverage,
            m.report
                .ranking
                .as_ref()
                .map_or("n/a".into(), |r| format!("{:.3}", r.accuracy))
        );
    }
}

fn benchmark_criterion(b: &Benchmark) -> Verdict {
    let (n, l, a) = (&b.neuneu, &b.logistic, &b.average);
    let overall = n.report.mae < l.report.mae;
    let inverse = n.inverse_mae <= INVERSE_RATIO * l.inverse_mae;
    let matched = n.matched_mae < a.matched_mae;
    check(
        overall && inverse && matched && b.elapsed <= BENCH_BUDGET,
        format!(
            "(a) NeuNeu {:.4} < Logistic {:.4}: {overall}; (b) inverse {:.4} <= {INVERSE_RATIO} x {:.4}: {inverse}; \
             (c) matched-mean {:.4} < Average {:.4}: {matched}; {:.1} min <= {} min",
            n.report.mae,
            l.report.mae,
            n.inverse_mae,
            l.inverse_mae,
            n.matched_mae,
            a.matched_mae,
            b.elapsed.as_secs_f64() / 60.0,
            BENCH_BUDGET.as_secs() / 60
        ),
    )
}

fn brute_coverage(records: &[nnsl::evalharness::EvalRecord]) -> f64 {
    let mut hits = 0usize;
    for r in records {
        if r.lo <= r.truth && r.truth <= r.hi {
            hits += 1;
        }
    }
    hits as f64 / records.len() as f64
}

fn calibration_criterion(b: &Benchmark) -> Verdict {
    let records = &b.neuneu.report.records;
    let intervals: Vec<(f64, f64)> = records.iter().map(|r| (r.lo, r.hi)).collect();
    let truths: Vec<f64> = records.iter().map(|r| r.truth).collect();
    let harness = calibration_coverage(&intervals, &truths).unwrap();
    let brute = brute_coverage(records);
    let in_band = (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(&harness);
    check(
        in_band && harness == brute && harness == b.neuneu.report.coverage,
        format!(
            "NeuNeu [q0.1, q0.9] coverage {harness:.4} in [{}, {}]: {in_band}; brute-force counter {brute:.4} equal: {}",
            COVERAGE_BAND.0,
            COVERAGE_BAND.1,
            harness == brute
        ),
    )
}

fn brute_ranking(f: &[FinalForecast]) -> Option<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if f[i].task != f[j].task
                || f[i].config == f[j].config
                || (f[i].truth - f[j].truth).abs() < 1e-12
            {
                continue;
            }
            let dp = f[i].pred - f[j].pred;
            let dt = f[i].truth - f[j].truth;
            total += if dp.abs() < 1e-12 {
                0.5
            } else if (dp > 0.0) == (dt > 0.0) {
                1.0
            } else {
                0.0
            };
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

fn ranking_criterion(b: &Benchmark) -> Verdict {
    let mut mismatches = 0;
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..30);
        let finals: Vec<FinalForecast> = (0..n)
            .map(|_| FinalForecast {
                config: format!("c{}", rng.random_range(0..n)),
                task: format!("t{}", rng.random_range(0..3)),
                group: String::new(),
                pred: rng.random_range(0..6) as f64 / 5.0,
                truth: rng.random_range(0..8) as f64 / 7.0,
            })
            .collect();
        let got = ranking_accuracy(&finals, PairingRule::AllPairs)
            .ok()
            .map(|r| r.accuracy);
        if got != brute_ranking(&finals) {
            mismatches += 1;
        }
    }
    let score = |m: &Method| {
        let harness = m.report.ranking.as_ref().map(|r| r.accuracy);
        (harness, brute_ranking(&final_forecasts(&m.report.records)))
    };
    let (nn, nn_brute) = score(&b.neuneu);
    let (lg, lg_brute) = score(&b.logistic);
    let agree = nn == nn_brute && lg == lg_brute;
    let better = matches!((nn, lg), (Some(x), Some(y)) if x >= y);
    check(
        mismatches == 0 && agree && better,
        format!(
            "harness vs brute force on 300 random sets: {mismatches} mismatches; benchmark NeuNeu {} >= Logistic {}: \
             {better}; benchmark oracle agreement: {agree}",
            nn.map_or("n/a".into(), |v| format!("{v:.4}")),
            lg.map_or("n/a".into(), |v| format!("{v:.4}")),
        ),
    )
}

// -------------------------------------------------------------- determinism

const PIPELINE_CONFIG: &str = r#"{
  "model": {
    "variant": "neuneu", "hidden_dim": 16, "layers": 1, "heads": 2, "ffn_dim": 32, "max_seq_len": 64,
    "encoder": { "input_len": 256, "bins": 16, "channels": [2, 4], "kernel": 4, "stride": 4, "padding": 0 },
    "quantiles": [0.1, 0.25, 0.5, 0.75, 0.9]
  },
  "train": { "learning_rate": 0.001, "batch_size": 16, "epochs": 2, "warmup_ratio": 0.1, "weight_decay": 0.033,
             "max_grad_norm": 1.0 }
}
"#;

const PIPELINE_OUTPUTS: [&str; 9] = [
    "corpus/run_manifest.json",
    "data.jsonl",
    "data.jsonl.run.json",
    "model.ckpt",
    "model.ckpt.loss.csv",
    "model.ckpt.run.json",
    "report.json",
    "report.csv",
    "report.json.run.json",
];

fn pipeline(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("config.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 4] = [
        &[
            "synth",
            "--out",
            "corpus",
            "--runs",
            "24",
            "--tokens",
            "256",
            "--checkpoints",
            "10",
            "--seed",
            "3",
        ],
        &[
            "build-data",
            "--trajs",
            "corpus/train",
            "--variant",
            "neuneu",
            "--max-per-run",
            "6",
            "--seed",
            "3",
            "--out",
            "data.jsonl",
        ],
        &[
            "train",
            "--manifest",
            "data.jsonl",
            "--config",
            "config.json",
            "--seed",
            "3",
            "--out",
            "model.ckpt",
        ],
        &[
            "evaluate",
            "--ckpt",
            "model.ckpt",
            "--trajs",
            "corpus/heldout",
            "--report",
            "report.json",
            "--csv",
            "report.csv",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_nnsl"))
            .current_dir(dir)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(())
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path())?;
    pipeline(b.path())?;
    let differing: Vec<&str> = PIPELINE_OUTPUTS
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .collect();
    let missing: Vec<&str> = PIPELINE_OUTPUTS
        .iter()
        .copied()
        .filter(|f| !a.path().join(f).exists())
        .collect();
    check(
        differing.is_empty() && missing.is_empty(),
        format!(
            "synth -> build-data -> train -> evaluate twice: {} files compared, differing {differing:?}, missing {missing:?}",
            PIPELINE_OUTPUTS.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    passed.push(run_criterion(1, "gradient oracle", gradient_oracle));
    passed.push(run_criterion(2, "shape oracle", shape_oracle));
    passed.push(run_criterion(3, "pinball oracle", pinball_oracle));
    passed.push(run_criterion(4, "logistic recovery", logistic_recovery));
    passed.push(run_criterion(
        5,
        "augmentation invariants",
        augmentation_invariants,
    ));
    passed.push(run_criterion(
        6,
        "histogram invariants",
        histogram_invariants,
    ));
    let bench = panic::catch_unwind(run_benchmark);
    match &bench {
        Ok(b) => {
            print_benchmark(b);
            passed.push(run_criterion(7, "desk benchmark", || {
                benchmark_criterion(b)
            }));
            passed.push(run_criterion(8, "calibration", || calibration_criterion(b)));
            passed.push(run_criterion(9, "ranking", || ranking_criterion(b)));
        }
        Err(_) => {
            for (id, name) in [(7, "desk benchmark"), (8, "calibration"), (9, "ranking")] {
                passed.push(run_criterion(id, name, || {
                    Err("benchmark did not complete".into())
                }));
            }
        }
    }
    passed.push(run_criterion(10, "determinism", determinism));
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
