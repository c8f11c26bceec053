use std::collections::BTreeSet;

use condbo::acquire::{select_batch, AcquisitionResult};
use condbo::bench::{jenatton_eval, jenatton_space, Jenatton};
use condbo::driver::{Clock, Method, ObservationRecord, ObservationSet, Optimizer, RunConfig, Source, Status};
use condbo::gp::{DeepKernelGp, FeatureMap, FitState, KernelParams};
use condbo::nn::{encode, EncoderConfig, EncoderParams, Pooling};
use condbo::space::{fixtures, Configuration, SearchSpace, Value};
use proptest::prelude::*;

const DOCS: [&str; 6] = [
    fixtures::SIMULATION,
    fixtures::JENATTON,
    fixtures::SVM,
    fixtures::XGBOOST,
    fixtures::CASH,
    fixtures::NAS,
];

fn pick(space: &SearchSpace, seed: u64) -> Configuration {
    let id = (seed % space.subspaces.len() as u64) as usize + 1;
    space.sample(id, seed).unwrap()
}

/// Subspaces whose slot keys and decision values both match `c`.
fn containing(space: &SearchSpace, c: &Configuration) -> usize {
    space
        .subspaces
        .iter()
        .filter(|s| {
            let keys: BTreeSet<&str> = s.slots.iter().map(|t| t.key.as_str()).collect();
            keys == c.raw.keys().map(String::as_str).collect() && s.decisions.iter().all(|(k, v)| c.raw.get(k) == Some(v))
        })
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_match_their_subspace(which in 0usize..DOCS.len(), seed in any::<u64>()) {
        let space = SearchSpace::parse(DOCS[which]).unwrap();
        let c = pick(&space, seed);
        let sub = space.subspace(c.subspace_id).unwrap();
        prop_assert_eq!(c.tokens.len(), sub.dimension());
        prop_assert_eq!(containing(&space, &c), 1);
        prop_assert_eq!(space.locate(&c.raw), Some(c.subspace_id));
        for t in &c.tokens {
            prop_assert!((0.0..=1.0).contains(&t.norm_value));
        }
    }

    #[test]
    fn jenatton_is_bounded_below(seed in any::<u64>()) {
        let c = pick(&jenatton_space(), seed);
        prop_assert!(jenatton_eval(&c.raw).unwrap() >= 0.1);
    }

    #[test]
    fn encoder_shape_and_determinism(seed in any::<u64>(), n in 1usize..6, token in any::<bool>()) {
        let space = SearchSpace::parse(fixtures::CASH).unwrap();
        let cfg = EncoderConfig {
            pooling: if token { Pooling::TokenMixer } else { Pooling::Average },
            ..EncoderConfig::compact()
        };
        let params = EncoderParams::init(&cfg, space.n_identities(), space.max_index as usize, seed).unwrap();
        let configs: Vec<Configuration> = (0..n as u64).map(|k| pick(&space, seed.wrapping_add(k))).collect();
        let refs: Vec<&Configuration> = configs.iter().collect();
        let a = encode(&refs, &params, &cfg).unwrap();
        prop_assert_eq!(a.dim(), (n, cfg.latent_dim));
        prop_assert_eq!(a, encode(&refs, &params, &cfg).unwrap());
    }

    #[test]
    fn value_only_encoder_ignores_structure(seed in any::<u64>()) {
        // jenatton subspaces 1 and 3 have equal length but different hyperparameters
        let space = jenatton_space();
        let cfg = EncoderConfig {
            use_structure_embeddings: false,
            ..EncoderConfig::compact()
        };
        let params = EncoderParams::init(&cfg, space.n_identities(), space.max_index as usize, seed).unwrap();
        let a = space.sample(1, seed).unwrap();
        let mut b = space.sample(3, seed ^ 1).unwrap();
        prop_assert_eq!(a.tokens.len(), b.tokens.len());
        for (ta, tb) in a.tokens.iter().zip(b.tokens.iter_mut()) {
            tb.norm_value = ta.norm_value;
        }
        let za = encode(&[&a], &params, &cfg).unwrap();
        let zb = encode(&[&b], &params, &cfg).unwrap();
        for (x, y) in za.iter().zip(zb.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let structured = EncoderConfig::compact();
        let params = EncoderParams::init(&structured, space.n_identities(), space.max_index as usize, seed).unwrap();
        prop_assert_ne!(encode(&[&a], &params, &structured).unwrap(), encode(&[&b], &params, &structured).unwrap());
    }

    #[test]
    fn kernel_matrix_symmetric_and_variance_bounded(seed in any::<u64>(), n in 2usize..10) {
        let space = jenatton_space();
        let cfg = EncoderConfig::compact();
        let params = EncoderParams::init(&cfg, space.n_identities(), space.max_index as usize, seed).unwrap();
        let model = DeepKernelGp::new(FeatureMap::Attention { cfg, params });
        let configs: Vec<Configuration> = (0..n as u64).map(|k| pick(&space, seed.wrapping_add(k))).collect();
        let refs: Vec<&Configuration> = configs.iter().collect();
        let k = model.covariance(&refs).unwrap();
        prop_assert!((&k - &k.t()).iter().all(|d| d.abs() <= 1e-10));
        let ys: Vec<f64> = configs.iter().map(|c| jenatton_eval(&c.raw).unwrap()).collect();
        let state = FitState::condition(model, &refs, &ys).unwrap();
        let queries: Vec<Configuration> = (0..5u64).map(|k| pick(&space, seed ^ (k + 99))).collect();
        let prior = state.model.kernel.outputscale();
        for p in state.predict_many(&queries.iter().collect::<Vec<_>>()).unwrap() {
            prop_assert!(p.variance >= 0.0 && p.variance <= prior + 1e-12);
        }
    }

    #[test]
    fn near_noiseless_posterior_recovers_training_targets(seed in any::<u64>()) {
        let space = jenatton_space();
        let configs: Vec<Configuration> = (0..8u64).map(|k| space.sample(1, seed.wrapping_add(k)).unwrap()).collect();
        let refs: Vec<&Configuration> = configs.iter().collect();
        let ys: Vec<f64> = configs.iter().map(|c| jenatton_eval(&c.raw).unwrap()).collect();
        let mut model = DeepKernelGp::new(FeatureMap::identity(4));
        model.kernel = KernelParams { log_lengthscale: -1.0, log_outputscale: 0.0, log_noise: -9.0 };
        let state = FitState::condition(model, &refs, &ys).unwrap();
        for (c, y) in configs.iter().zip(&ys) {
            let raw = state.to_raw(state.predict(c).unwrap().mean);
            prop_assert!((raw - y).abs() <= 1e-2 * state.y_std, "{} vs {}", raw, y);
        }
    }

    #[test]
    fn select_batch_sorted_and_distinct(scores in proptest::collection::vec(0.0f64..1.0, 1..12), b in 1usize..12) {
        let space = SearchSpace::parse(fixtures::SIMULATION).unwrap();
        let results: Vec<AcquisitionResult> = scores
            .iter()
            .enumerate()
            .map(|(i, &ei_value)| AcquisitionResult {
                subspace_id: i + 1,
                config: space.sample(1, i as u64).unwrap(),
                ei_value,
            })
            .collect();
        let b = b.min(scores.len());
        let batch = select_batch(results, b).unwrap();
        prop_assert_eq!(batch.len(), b);
        prop_assert!(batch.windows(2).all(|w| w[0].ei_value >= w[1].ei_value));
        let ids: BTreeSet<usize> = batch.iter().map(|r| r.subspace_id).collect();
        prop_assert_eq!(ids.len(), b);
    }

    #[test]
    fn best_so_far_is_monotone(ys in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 1..40)) {
        let space = jenatton_space();
        let mut set = ObservationSet::new();
        for (k, y) in ys.iter().enumerate() {
            set.push(ObservationRecord {
                iter: k,
                config: pick(&space, k as u64),
                y: *y,
                status: if y.is_some() { Status::Ok } else { Status::Failed },
                seed: k as u64,
                wall_ms: 0,
                ts: k as u64,
                source: Source::External,
                error: y.is_none().then(|| "failed".to_string()),
            });
        }
        let curve = set.best_so_far();
        prop_assert_eq!(curve.len(), ys.len());
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0] || w[0].is_infinite() && w[1].is_infinite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn batches_use_distinct_subspaces(seed in any::<u64>(), b in 1usize..5, indep in any::<bool>()) {
        let run = RunConfig {
            iterations: 3,
            batch: b,
            seed,
            method: if indep { Method::IndependentGp } else { Method::RandomSearch },
            clock: Clock::Logical,
            ..Default::default()
        };
        let mut opt = Optimizer::new(jenatton_space(), run).unwrap();
        opt.run(&Jenatton).unwrap();
        let records = &opt.observations().records;
        for iter in 1..=3 {
            let ids: Vec<usize> = records.iter().filter(|r| r.iter == iter).map(|r| r.subspace_id()).collect();
            prop_assert_eq!(ids.len(), b);
            prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), b);
        }
    }
}

#[test]
fn identity_codes_are_a_stable_bijection() {
    for doc in DOCS {
        let a = SearchSpace::parse(doc).unwrap();
        let codes: BTreeSet<u32> = a.id_codes.values().copied().collect();
        assert_eq!(codes, (1..=a.n_identities() as u32).collect());
        assert_eq!(a.id_codes, SearchSpace::parse(doc).unwrap().id_codes);
    }
}

#[test]
fn father_codes_follow_the_nearest_structural_ancestor() {
    for doc in DOCS {
        let space = SearchSpace::parse(doc).unwrap();
        for sub in &space.subspaces {
            for slot in &sub.slots {
                let expected = slot.father.as_ref().map_or(0, |f| space.id_codes[f]);
                assert_eq!(slot.father_code, expected, "{}", slot.key);
                assert_eq!(slot.id_code, space.id_codes[&slot.name]);
            }
        }
    }
}

#[test]
fn jenatton_minimum_is_reachable() {
    let space = jenatton_space();
    let mut c = space.sample(1, 0).unwrap();
    for (k, v) in c.raw.iter_mut() {
        if k != "x1" && k != "x2" {
            *v = Value::Float(0.0);
        }
    }
    assert_eq!(jenatton_eval(&c.raw).unwrap(), 0.1);
}
