mod common;

use blrhac::adapt::{
    nonstationary_experiment, sgd_update, stationary_experiment, AgentFactory, ExperimentConfig,
};
use blrhac::config::RunConfig;
use blrhac::env::{Episode, EpisodeRecord, WorldState};
use blrhac::nn::{
    encode_history, Checkpoint, CheckpointFile, Family, HistoryWindow, TokenSequence, TrainingMeta,
};
use blrhac::policy::{action_distribution, masked_argmax};
use blrhac::population::{
    demonstrations_for, expert_placement, sample_population, PreferenceMatrix,
};
use blrhac::pretrain::evaluate_zero_shot;
use blrhac::{EnvironmentSpec, PopulationConfig, Result, Split};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env_dims() -> impl Strategy<Value = EnvironmentSpec> {
    (1usize..=8)
        .prop_flat_map(|o| (Just(o), 1usize..=o))
        .prop_map(|(o, l)| EnvironmentSpec::custom(o, l).unwrap())
}

fn random_theta(env: &EnvironmentSpec, seed: u64) -> PreferenceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Array2::from_shape_simple_fn((env.num_objects, env.num_locations), || {
        rng.gen_range(-2.0..2.0)
    });
    PreferenceMatrix::new(theta, format!("p{seed}"), 0).unwrap()
}

fn run_episode(env: &EnvironmentSpec, seed: u64, pref: &PreferenceMatrix) -> Episode {
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut robot = |_: &WorldState, _: usize, vacant: &[usize]| -> Result<usize> {
        Ok(vacant[noise.gen_range(0..vacant.len())])
    };
    let mut corrector = pref.expert();
    Episode::run(
        env,
        pref.preference_id.clone(),
        seed,
        &mut robot,
        &mut corrector,
    )
    .unwrap()
}

fn occupied(s: &WorldState) -> usize {
    (0..s.num_locations()).filter(|&l| !s.is_vacant(l)).count()
}

fn random_window(env: &EnvironmentSpec, k: usize, seed: u64) -> HistoryWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (o, l) = (env.num_objects, env.num_locations);
    let n = rng.gen_range(0..=k);
    HistoryWindow {
        k,
        entries: (0..n)
            .map(|_| {
                [
                    rng.gen_range(0..o),
                    rng.gen_range(0..l),
                    rng.gen_range(0..l),
                ]
            })
            .collect(),
        current_pick: rng.gen_range(0..o),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_conserve_and_mask(env in env_dims(), seed in any::<u64>()) {
        let pref = random_theta(&env, seed);
        let ep = run_episode(&env, seed, &pref);
        prop_assert_eq!(ep.steps.len(), env.num_locations);
        for (t, s) in ep.steps.iter().enumerate() {
            prop_assert_eq!(s.state_before.turn_index(), t);
            prop_assert!(s.state_before.is_unplaced(s.a_h));
            prop_assert!(s.state_before.is_vacant(s.a_c));
            prop_assert!(s.state_before.is_vacant(s.a_r));
            prop_assert_eq!(s.state_after.placement_of(s.a_h), Some(s.a_c));
            prop_assert_eq!(occupied(&s.state_after), s.state_after.turn_index());
            prop_assert_eq!(
                s.state_after.unplaced_objects().len() + occupied(&s.state_after),
                env.num_locations
            );
        }
        prop_assert!(ep.steps.last().unwrap().state_after.is_complete());
    }

    #[test]
    fn episodes_are_deterministic(env in env_dims(), seed in any::<u64>()) {
        let pref = random_theta(&env, seed);
        prop_assert_eq!(run_episode(&env, seed, &pref), run_episode(&env, seed, &pref));
    }

    #[test]
    fn episode_record_round_trips(env in env_dims(), seed in any::<u64>()) {
        let ep = run_episode(&env, seed, &random_theta(&env, seed));
        let text = serde_json::to_string(&ep).unwrap();
        let back: Episode = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &ep);
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn replaying_onto_an_occupied_location_is_rejected(env in env_dims(), seed in any::<u64>()) {
        prop_assume!(env.num_locations >= 2);
        let ep = run_episode(&env, seed, &random_theta(&env, seed));
        let mut rec: EpisodeRecord = ep.to_record();
        rec.steps[1][2] = rec.steps[0][2];
        prop_assert!(Episode::try_from(rec).is_err());
    }

    #[test]
    fn update_is_local_and_signed(
        env in env_dims(),
        seed in any::<u64>(),
        alpha in 1e-3f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_theta(&env, seed).theta;
        let (a_h, a_r, a_c) = (
            rng.gen_range(0..env.num_objects),
            rng.gen_range(0..env.num_locations),
            rng.gen_range(0..env.num_locations),
        );
        let mut after = theta.clone();
        let deltas = sgd_update(&mut after, a_h, a_r, a_c, alpha).unwrap();
        let changed = theta.iter().zip(after.iter()).filter(|(x, y)| x != y).count();
        if a_r == a_c {
            prop_assert_eq!(changed, 0);
            prop_assert!(deltas.is_empty());
        } else {
            prop_assert!(changed <= 2);
            let gap = |m: &Array2<f64>| m[[a_h, a_c]] - m[[a_h, a_r]];
            let grew = gap(&after) - gap(&theta);
            prop_assert!((grew - 2.0 * alpha).abs() <= 1e-12 * (1.0 + alpha));
        }
    }

    #[test]
    fn masked_policy_never_selects_occupied(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        mask_bits in any::<u16>(),
    ) {
        let mut vacant: Vec<usize> = (0..row.len()).filter(|i| mask_bits >> i & 1 == 1).collect();
        if vacant.is_empty() {
            vacant.push(row.len() - 1);
        }
        let best = masked_argmax(&row, &vacant).unwrap();
        prop_assert!(vacant.contains(&best));
        prop_assert!(vacant.iter().all(|&l| row[l] <= row[best]));
        let dist = action_distribution(&row, &vacant).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (l, p) in dist.iter().enumerate() {
            if !vacant.contains(&l) {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn tokens_round_trip(env in env_dims(), k in 0usize..8, seed in any::<u64>()) {
        let w = random_window(&env, k, seed);
        let seq = encode_history(&w, &env).unwrap();
        prop_assert_eq!(seq.len(), 3 * k + 2);
        prop_assert_eq!(TokenSequence::decode(&seq.tokens, &env).unwrap(), w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transformer_ignores_padding_contents(seed in any::<u64>(), prior in any::<bool>(), fill in prop::collection::vec(0usize..208, 16)) {
        let (model, _) = common::tiny_instance(Family::CausalTransformer, prior, seed);
        let env = *model.env();
        let k = model.spec().history_len;
        let mut w = random_window(&env, k, seed);
        w.entries.truncate(k.saturating_sub(1));
        let seq = encode_history(&w, &env).unwrap();
        let mut noisy = seq.clone();
        for (i, t) in noisy.tokens.iter_mut().enumerate().take(seq.active_start()) {
            *t = fill[i % fill.len()];
        }
        let a = model.location_scores(&seq, w.current_pick).unwrap();
        let b = model.location_scores(&noisy, w.current_pick).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn prior_heads_emit_full_matrices(seed in any::<u64>(), fi in 0usize..4) {
        let (model, _) = common::tiny_instance(common::FAMILIES[fi], true, seed);
        let env = *model.env();
        let w = random_window(&env, model.spec().history_len, seed);
        let theta = model.forward_theta(&encode_history(&w, &env).unwrap()).unwrap();
        prop_assert_eq!(theta.theta_hat.dim(), (env.num_objects, env.num_locations));
        prop_assert!(theta.theta_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_file_is_a_fixed_point(seed in any::<u64>(), fi in 0usize..4, prior in any::<bool>()) {
        let (model, _) = common::tiny_instance(common::FAMILIES[fi], prior, seed);
        let ck = Checkpoint { model, training: TrainingMeta::untrained(seed) };
        let text = serde_json::to_string(&ck.to_file()).unwrap();
        let file: CheckpointFile = serde_json::from_str(&text).unwrap();
        let back = Checkpoint::try_from(file).unwrap();
        prop_assert_eq!(serde_json::to_string(&back.to_file()).unwrap(), text);
    }

    #[test]
    fn config_is_a_fixed_point(seed in any::<u64>(), alpha in 0.1f64..50.0, lr in 1e-6f64..1e-1, k in 1usize..60) {
        let mut cfg = RunConfig::desk(seed);
        cfg.adapt.alpha = alpha;
        cfg.train.learning_rate = lr;
        cfg.model.history_len = k;
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn demonstrations_follow_the_expert(seed in any::<u64>()) {
        let env = EnvironmentSpec::small();
        let mut cfg = PopulationConfig::desk(seed);
        cfg.prefs_per_split.train = 4;
        cfg.prefs_per_split.eval = 2;
        cfg.prefs_per_split.test = 2;
        cfg.episodes_per_pref.train = 3;
        let pop = sample_population(&cfg, &env).unwrap();
        let ids: Vec<_> = Split::ALL
            .iter()
            .flat_map(|&s| pop.split(s).iter().map(|p| p.preference_id.clone()))
            .collect();
        let mut unique = ids.clone();
        unique.sort();
        unique.dedup();
        prop_assert_eq!(unique.len(), ids.len());
        let ds = demonstrations_for(&pop, Split::Train).unwrap();
        for ep in &ds.episodes {
            let pref = ds.preference(&ep.preference_id).unwrap();
            for s in &ep.steps {
                let vacant = s.state_before.vacant_locations();
                prop_assert_eq!(s.a_c, expert_placement(pref, s.a_h, &vacant).unwrap());
                prop_assert_eq!(s.a_r, s.a_c);
            }
        }
    }

    #[test]
    fn evaluation_leaves_parameters_untouched(seed in any::<u64>(), fi in 0usize..4, prior in any::<bool>()) {
        let env = EnvironmentSpec::small();
        let mut cfg = PopulationConfig::desk(seed);
        cfg.prefs_per_split.test = 2;
        cfg.episodes_per_pref.test = 2;
        let pop = sample_population(&cfg, &env).unwrap();
        let ds = demonstrations_for(&pop, Split::Test).unwrap();
        let family = common::FAMILIES[fi];
        let mut spec = blrhac::nn::ModelSpec::new(family, env, prior).with_dims(8, 1);
        spec.num_heads = 2;
        spec.history_len = 4;
        let mut model = blrhac::nn::Model::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params_mut().tensors_mut() {
            t.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let before = model.params().clone();
        let report = evaluate_zero_shot(&model, &ds, &env).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.accuracy));
        prop_assert!(model.params().iter().zip(before.iter()).all(|(a, b)| a.2 == b.2));
    }

    #[test]
    fn protocols_share_the_first_ten_episodes(seed in any::<u64>(), alpha in 0.5f64..20.0) {
        let env = EnvironmentSpec::small();
        let mut pcfg = PopulationConfig::desk(seed);
        pcfg.prefs_per_split.test = 4;
        let pop = sample_population(&pcfg, &env).unwrap();
        let cfg = ExperimentConfig { episodes: 12, seed, ..ExperimentConfig::default() };
        let f = AgentFactory::LinearScratch { alpha };
        let s = stationary_experiment(&f, &pop.test, &env, &cfg).unwrap();
        let n = nonstationary_experiment(&f, &pop.test, &env, &cfg).unwrap();
        prop_assert_eq!(&s.per_episode_accuracy[..10], &n.per_episode_accuracy[..10]);
        prop_assert_eq!(n.switch_episode, Some(10));
    }
}
