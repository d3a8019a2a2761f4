use ndgrad::gradcheck::check_params;
use ndgrad::{GradError, Graph, ParamStore, Tensor};
use nnsl::datapipe::{
    build_descriptors, BuildOptions, ContextSequence, HistogramDelta, MemoryLossStore,
    Representation, TokenProbVector, Variant,
};
use nnsl::encoders::{EncoderConfig, Init, LinearIds};
use nnsl::forecaster::{
    decode_checkpoint, diffprobe_raw, embed_context, encode_checkpoint, pinball_loss, train,
    ContextIds, Forecaster, ModelConfig, QuantilePrediction, RunConfig, TrainConfig, TrainSet,
    QUANTILES,
};
use nnsl::synthgen::{CorpusConfig, SyntheticCorpus};
use nnsl::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_dim: d,
        layers,
        heads: 2,
        ffn_dim: 2 * d,
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

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn rep_for(variant: Variant, rng: &mut ChaCha8Rng) -> Representation {
    match variant {
        Variant::NeuNeu => Representation::TokenProbs(
            TokenProbVector::new((0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        ),
        Variant::Average => {
            Representation::AvgProbSequence((0..3).map(|_| rng.random_range(0.2..0.8)).collect())
        }
        Variant::HistDiff | Variant::DiffProbe => {
            let mut delta: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
            let mean = delta.iter().sum::<f64>() / 8.0;
            delta.iter_mut().for_each(|v| *v -= mean);
            Representation::HistDelta(HistogramDelta { delta })
        }
        Variant::NoLoss => Representation::None,
    }
}

fn ctx(pairs: &[(f64, u32)]) -> ContextSequence {
    ContextSequence::new(pairs.to_vec()).unwrap()
}

fn to_grad(e: Error) -> GradError {
    GradError::InvalidArgument(e.to_string())
}

#[test]
fn pinball_examples() {
    assert_eq!(pinball_loss(&[0.3; 5], 0.3, &QUANTILES), 0.0);
    assert!((pinball_loss(&[0.5], 0.6, &[0.5]) - 0.05).abs() < 1e-15);
    let got = pinball_loss(&[0.4, 0.45, 0.5, 0.55, 0.6], 0.5, &QUANTILES);
    assert!((got - 0.045).abs() < 1e-12, "{got}");
}

fn pinball_term_by_term(raw: &[f64], a: f64, taus: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..raw.len() {
        if a >= raw[i] {
            total += taus[i] * (a - raw[i]);
        } else {
            total += (1.0 - taus[i]) * (raw[i] - a);
        }
    }
    total
}

#[test]
fn pinball_matches_term_by_term_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let a = rng.random_range(0.0..1.0);
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..1.5)).collect();
        assert!(
            (pinball_loss(&raw, a, &QUANTILES) - pinball_term_by_term(&raw, a, &QUANTILES)).abs()
                <= 1e-12
        );
    }
}

proptest! {
    #[test]
    fn sorting_never_raises_pinball(raw in prop::collection::vec(-0.5f64..1.5, 5), a in 0.0f64..1.0) {
        let q = QuantilePrediction { raw: raw.clone() };
        prop_assert!(pinball_loss(&q.sorted(), a, &QUANTILES) <= pinball_loss(&raw, a, &QUANTILES) + 1e-12);
        let (m, lo, hi) = q.point_and_interval();
        prop_assert!((0.0..=1.0).contains(&m) && lo <= m && m <= hi && hi <= 1.0 && lo >= 0.0);
    }
}

#[test]
fn point_and_interval_examples() {
    let sorted = QuantilePrediction {
        raw: vec![0.1, 0.2, 0.3, 0.4, 0.5],
    };
    assert_eq!(sorted.sorted(), sorted.raw);
    assert_eq!(sorted.point_and_interval(), (0.3, 0.1, 0.5));
    let crossed = QuantilePrediction {
        raw: vec![0.3, 0.2, 0.5, 0.4, 0.6],
    };
    assert_eq!(crossed.sorted(), vec![0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(crossed.point_and_interval(), (0.4, 0.2, 0.6));
    let high = QuantilePrediction {
        raw: vec![0.9, 1.0, 1.1, 1.2, 1.3],
    };
    assert_eq!(high.point_and_interval(), (1.0, 0.9, 1.0));
}

fn context_ids(store: &mut ParamStore, d: usize, seed: u64) -> ContextIds {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
    ContextIds {
        accuracy: LinearIds::create(store, &mut init, "y", 1, d / 2).unwrap(),
        gap: LinearIds::create(store, &mut init, "g", 1, d / 2).unwrap(),
    }
}

#[test]
fn context_embedding_halves() {
    let d = 8;
    let mut store = ParamStore::new();
    let ids = context_ids(&mut store, d, 1);
    let embed = |y: f64, gap: f64| {
        let mut g = Graph::with_params(&store);
        let yv = g.constant(Tensor::new(vec![1, 1], vec![y]).unwrap());
        let gv = g.constant(Tensor::new(vec![1, 1], vec![gap]).unwrap());
        let c = embed_context(&mut g, &ids, yv, gv).unwrap();
        g.value(c).to_vec()
    };
    let a = embed(0.6, 1.0);
    let b = embed(0.6, 5.0);
    assert_eq!(a.len(), d);
    assert_eq!(a[..d / 2], b[..d / 2]);
    assert!(a[d / 2..].iter().zip(&b[d / 2..]).all(|(x, y)| x != y));
    assert!(embed(0.0, 3.0)[..d / 2].iter().all(|&v| v == 0.0));
    // the gap enters as ln(1 + g)
    let w = store.get(ids.gap.weight).data().to_vec();
    for (i, v) in embed(0.2, 4.0)[d / 2..].iter().enumerate() {
        assert!((v - w[i] * 5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn context_embedding_jacobian_matches_finite_differences() {
    let d = 8;
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let ids = context_ids(&mut store, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = store
            .insert(
                "yin",
                Tensor::new(
                    vec![3, 1],
                    (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        let gap = store
            .insert(
                "gin",
                Tensor::new(
                    vec![3, 1],
                    (0..3).map(|_| rng.random_range(1.0..20.0)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        randomize_except(&mut store, &[y, gap], seed);
        let report = check_params(&store, 1e-5, 50, |g, _| {
            let (yv, gv) = (g.param(y), g.param(gap));
            let c = embed_context(g, &ids, yv, gv).map_err(to_grad)?;
            let mut prng = ChaCha8Rng::seed_from_u64(seed + 500);
            let r = g.constant(Tensor::new(
                vec![3, d],
                (0..3 * d).map(|_| prng.random_range(-1.0..1.0)).collect(),
            )?);
            let p = g.mul(c, r)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
    }
}

fn randomize_except(store: &mut ParamStore, keep: &[ndgrad::ParamId], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    let ids: Vec<_> = store
        .iter()
        .map(|(id, _, _)| id)
        .filter(|id| !keep.contains(id))
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn forward_emits_five_quantiles_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in Variant::ALL {
        let model = Forecaster::new(tiny(variant, 16, 1), 0).unwrap();
        let q = model
            .forward(&ctx(&[(0.5, 1), (0.6, 5)]), &rep_for(variant, &mut rng))
            .unwrap();
        assert_eq!(q.raw.len(), 5, "{variant}");
        assert!(q.raw.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn zero_weights_give_zero_output() {
    for variant in [
        Variant::NoLoss,
        Variant::NeuNeu,
        Variant::Average,
        Variant::HistDiff,
    ] {
        let mut model = Forecaster::new(tiny(variant, 16, 2), 3).unwrap();
        randomize(model.params_mut(), 0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = model
            .forward(&ctx(&[(0.5, 1), (0.6, 5)]), &rep_for(variant, &mut rng))
            .unwrap();
        assert_eq!(q.raw, vec![0.0; 5], "{variant}");
    }
}

#[test]
fn untrained_head_bias_holds_the_quantile_levels() {
    let model = Forecaster::new(tiny(Variant::NoLoss, 16, 1), 0).unwrap();
    assert_eq!(
        model.params().by_name("head.bias").unwrap().data(),
        &QUANTILES
    );
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let model = Forecaster::new(tiny(Variant::NeuNeu, 16, 1), 0).unwrap();
    let c = ctx(&[(0.5, 1)]);
    assert!(matches!(
        model.forward(&c, &Representation::None),
        Err(Error::InvalidArgument(_))
    ));
    let long = ContextSequence::new(vec![(0.5, 1); 63]).unwrap();
    let rep = Representation::TokenProbs(TokenProbVector::new(vec![0.5; 48]).unwrap());
    assert!(matches!(
        model.forward(&long, &rep),
        Err(Error::InvalidArgument(_))
    ));
    assert!(model
        .forward(&model.fit_context(&long).unwrap(), &rep)
        .is_ok());
    // short token vectors are zero-padded to the encoder length
    let short = Representation::TokenProbs(TokenProbVector::new(vec![0.5; 10]).unwrap());
    assert!(model.forward(&c, &short).is_ok());
}

#[test]
fn noloss_parameters_are_a_subset_of_neuneu() {
    let full = Forecaster::new(tiny(Variant::NeuNeu, 16, 1), 0).unwrap();
    let bare = Forecaster::new(tiny(Variant::NoLoss, 16, 1), 0).unwrap();
    for (_, name, t) in bare.params().iter() {
        let id = full
            .params()
            .id(name)
            .unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(full.params().get(id).shape(), t.shape());
    }
    let extra: Vec<&str> = full
        .params()
        .iter()
        .filter(|(_, n, _)| bare.params().id(n).is_none())
        .map(|(_, n, _)| n)
        .collect();
    assert!(!extra.is_empty() && extra.iter().all(|n| n.starts_with("encoder.")));
}

#[test]
fn horizons_are_independent() {
    let model = Forecaster::new(tiny(Variant::NoLoss, 16, 2), 5).unwrap();
    let c = ctx(&[(0.4, 1), (0.45, 1)]);
    let reps = [Representation::None];
    let one = model.forecast_horizons(&c, &[3], &reps).unwrap();
    assert_eq!(
        one[0],
        model.forward(&c.with_target_gap(3), &reps[0]).unwrap()
    );
    let fwd = model.forecast_horizons(&c, &[1, 2, 3], &reps).unwrap();
    let rev = model.forecast_horizons(&c, &[3, 2, 1], &reps).unwrap();
    assert_eq!(fwd.len(), 3);
    assert_eq!(fwd, rev.into_iter().rev().collect::<Vec<_>>());
    assert!(model.forecast_horizons(&c, &[0], &reps).is_err());
}

#[test]
fn diffprobe_starts_at_the_anchor() {
    let model = Forecaster::new(tiny(Variant::DiffProbe, 16, 1), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rep = rep_for(Variant::DiffProbe, &mut rng);
    let q = model.forward(&ctx(&[(0.3, 1), (0.42, 4)]), &rep).unwrap();
    assert!(q.raw.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    let mut trained = model.clone();
    randomize(trained.params_mut(), 9, 3.0);
    for _ in 0..50 {
        let rep = rep_for(Variant::DiffProbe, &mut rng);
        let q = trained
            .forward(&ctx(&[(rng.random_range(0.0..1.0), 1)]), &rep)
            .unwrap();
        let (m, lo, hi) = q.point_and_interval();
        assert!([m, lo, hi].iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(lo, hi);
    }
}

#[test]
fn diffprobe_gradients_match_finite_differences() {
    let cfg = tiny(Variant::DiffProbe, 16, 1);
    for seed in 0..10 {
        let mut model = Forecaster::new(cfg.clone(), seed).unwrap();
        randomize(model.params_mut(), seed, 0.5);
        let ids = *model.probe_ids().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta: Vec<f64> = (0..8).map(|_| rng.random_range(-0.2..0.2)).collect();
        let report = check_params(model.params(), 1e-5, 40, |g, _| {
            let x = g.constant(Tensor::from_vec(delta.clone()));
            let v = diffprobe_raw(g, &ids, x, 0.4).map_err(to_grad)?;
            g.pinball(v, 0.55, &[0.5])
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        for seed in 0..10 {
            let mut model = Forecaster::new(tiny(variant, 16, 1), seed).unwrap();
            randomize(model.params_mut(), seed + 1000, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = rep_for(variant, &mut rng);
            let c = ctx(&[(0.3, 1), (0.35, 2), (0.5, 3)]);
            let target = rng.random_range(0.0..1.0);
            let report = check_params(model.params(), 1e-5, 12, |g, _| {
                let q = model.forward_graph(g, &c, &rep).map_err(to_grad)?;
                g.pinball(q, target, &QUANTILES)
            })
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-3,
                "{variant} seed {seed}: {report:?}"
            );
        }
    }
}

fn small_corpus(runs: usize) -> SyntheticCorpus {
    SyntheticCorpus::generate(&CorpusConfig {
        runs,
        checkpoints: 8,
        tokens: 48,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn tiny_run(variant: Variant, batch: usize, epochs: usize) -> RunConfig {
    RunConfig {
        model: tiny(variant, 16, 1),
        train: TrainConfig {
            batch_size: batch,
            epochs,
            learning_rate: 3e-3,
            ..TrainConfig::desk()
        },
    }
}

#[test]
fn step_count_keeps_the_partial_batch() {
    let corpus = small_corpus(4);
    let descs = build_descriptors(&corpus.trajectories, &BuildOptions::default()).unwrap();
    let ten = &descs[..10];
    let out = train(
        TrainSet {
            trajectories: &corpus.trajectories,
            examples: ten,
        },
        &corpus,
        &tiny_run(Variant::NoLoss, 4, 2),
        0,
    )
    .unwrap();
    assert_eq!(out.trace.len(), 6);
    assert_eq!(
        out.trace.iter().map(|r| r.step).collect::<Vec<_>>(),
        (0..6).collect::<Vec<_>>()
    );
    assert!(out.abort.is_none());
}

#[test]
fn training_is_deterministic_per_seed() {
    let corpus = small_corpus(4);
    let descs = build_descriptors(&corpus.trajectories, &BuildOptions::default()).unwrap();
    let set = TrainSet {
        trajectories: &corpus.trajectories,
        examples: &descs[..40],
    };
    let cfg = tiny_run(Variant::NeuNeu, 8, 1);
    let a = train(set, &corpus, &cfg, 7).unwrap();
    let b = train(set, &corpus, &cfg, 7).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.params(), b.model.params());
    let c = train(set, &corpus, &cfg, 8).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn smoke_training_halves_the_loss() {
    let corpus = small_corpus(40);
    let opts = BuildOptions {
        max_per_run: Some(5),
        ..BuildOptions::default()
    };
    let descs = build_descriptors(&corpus.trajectories, &opts).unwrap();
    assert_eq!(descs.len(), 200);
    let set = TrainSet {
        trajectories: &corpus.trajectories,
        examples: &descs,
    };
    let mut cfg = tiny_run(Variant::NoLoss, 8, 40);
    cfg.train.learning_rate = 1e-2;
    let out = train(set, &corpus, &cfg, 0).unwrap();
    let mean_loss = |model: &Forecaster| {
        let store = MemoryLossStore::new();
        descs
            .iter()
            .map(|d| {
                let ex = nnsl::datapipe::materialize(
                    d,
                    &corpus.trajectories[d.run],
                    model.representation_kind(),
                    &store,
                    8,
                )
                .unwrap();
                pinball_loss(
                    &model.forward(&ex.context, &ex.representation).unwrap().raw,
                    ex.target_accuracy,
                    &QUANTILES,
                )
            })
            .sum::<f64>()
            / descs.len() as f64
    };
    let before = mean_loss(&Forecaster::new(cfg.model.clone(), 0).unwrap());
    let after = mean_loss(&out.model);
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let cfg = tiny_run(Variant::NeuNeu, 4, 1);
    let mut model = Forecaster::new(cfg.model.clone(), 4).unwrap();
    randomize(model.params_mut(), 4, 1.0);
    let bytes = encode_checkpoint(&model, &cfg, 4).unwrap();
    assert_eq!(&bytes[..4], b"NNCK");
    let path = std::path::Path::new("m.ckpt");
    let (back, header) = decode_checkpoint(path, &bytes).unwrap();
    assert_eq!(header.seed, 4);
    assert_eq!(header.config, cfg);
    assert_eq!(back.params(), model.params());
    assert_eq!(
        encode_checkpoint(&back, &header.config, header.seed).unwrap(),
        bytes
    );

    for cut in [3, 10, 20, bytes.len() - 1] {
        assert!(
            matches!(
                decode_checkpoint(path, &bytes[..cut]),
                Err(Error::Format { .. })
            ),
            "cut {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(path, &bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let other = tiny_run(Variant::NoLoss, 4, 1);
    assert!(encode_checkpoint(&model, &other, 0).is_err());
}

#[test]
fn configs_validate() {
    let mut c = tiny(Variant::NeuNeu, 16, 1);
    c.heads = 3;
    assert!(Forecaster::new(c, 0).is_err());
    let mut c = tiny(Variant::NoLoss, 16, 1);
    c.quantiles = vec![0.5, 0.1];
    assert!(Forecaster::new(c, 0).is_err());
    let mut t = TrainConfig::desk();
    t.batch_size = 0;
    assert!(t.validate().is_err());
    assert!(RunConfig::desk(Variant::NeuNeu).validate().is_ok());
    let json = serde_json::to_string(&RunConfig::desk(Variant::Average)).unwrap();
    assert!(serde_json::from_str::<RunConfig>(&json.replace("\"epochs\"", "\"epoch\"")).is_err());
}
