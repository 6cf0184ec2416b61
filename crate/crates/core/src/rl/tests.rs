use std::sync::Arc;

use super::tabular::value_iteration;
use super::*;
use crate::envs::corridor::RepeatCorridor;
use crate::envs::doorkey::DoorKeyEnv;
use crate::envs::tabular::{bundled, reward_chain, two_state, TabularEnv, TabularMdp, BUNDLED};
use crate::rewardmodel::{FeatureSpec, MlpParams, RewardModel};

fn two_cell_loop() -> TabularEnv {
    let mdp = TabularMdp::new(
        vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
        vec![vec![1.0], vec![1.0]],
        0.9,
        vec![1.0, 0.0],
        vec![false, false],
    )
    .unwrap();
    TabularEnv::new(mdp, "loop").unwrap().with_max_steps(6)
}

#[test]
fn q_learning_two_state_matches_oracle() {
    let mdp = two_state(0.9);
    let oracle = value_iteration(&mdp, 1e-12).unwrap();
    let mut env = TabularEnv::new(mdp, "two").unwrap();
    let cfg = QConfig {
        episodes: 1000,
        gamma: 0.9,
        ..Default::default()
    };
    let out = q_learning(&mut env, &RewardSource::Env, &cfg).unwrap();
    let s0 = env.reset(0).state_key;
    assert!((out.table.q(&s0, 0) - oracle.values[0]).abs() < 0.05);
    let again = q_learning(&mut env, &RewardSource::Env, &cfg).unwrap();
    assert_eq!(again.table, out.table);
}

#[test]
fn q_learning_converges_on_bundled_mdps() {
    for name in BUNDLED {
        let mdp = bundled(name).unwrap();
        let oracle = value_iteration(&mdp, 1e-12).unwrap();
        let mut env = TabularEnv::new(mdp.clone(), name).unwrap();
        let cfg = QConfig {
            episodes: 20_000,
            gamma: mdp.gamma,
            epsilon: 0.3,
            rng_seed: 3,
            ..Default::default()
        };
        let out = q_learning(&mut env, &RewardSource::Env, &cfg).unwrap();
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let mut probe = env.clone();
            probe.set_state(s);
            let key = probe.observe().state_key;
            if out.table.get(&key).is_none() {
                continue;
            }
            let v = out.table.value(&key);
            assert!(
                (v - oracle.values[s]).abs() < 0.05,
                "{name} state {s}: {v} vs {}",
                oracle.values[s]
            );
        }
    }
}

#[test]
fn count_shaping_decays_revisit_rewards() {
    let mut env = two_cell_loop();
    let source = RewardSource::shaped(RewardSource::Env, Shaping::Count { beta: 3.0 });
    let cfg = QConfig {
        episodes: 1,
        log_rewards: true,
        ..Default::default()
    };
    let out = q_learning(&mut env, &source, &cfg).unwrap();
    // start in cell 0 (count 1), then alternate
    let expect = [
        1.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 27.0,
        1.0 / 27.0,
        1.0 / 64.0,
    ];
    assert_eq!(out.rewards[0].len(), expect.len());
    for (r, e) in out.rewards[0].iter().zip(expect) {
        assert!((r - e).abs() < 1e-15);
    }
}

#[test]
fn hurl_source_discount_and_bonus() {
    let mdp = reward_chain(4, 0.5);
    let mut env = TabularEnv::new(mdp, "chain").unwrap();
    let h = Arc::new(vec![0.0, 1.0, 2.0, 3.0]);
    let source = RewardSource::shaped(
        RewardSource::Env,
        Shaping::Hurl {
            lambda: 0.5,
            heuristic: h,
        },
    );
    assert_eq!(source.effective_gamma(0.5), 0.25);
    let first = env.reset(0);
    let mut stream = source.start_episode(&first);
    let out = env.step(0).unwrap();
    // r + (1 - 0.5) * 0.5 * h(1)
    assert!((stream.reward(&out, 0.5).unwrap() - 1.25).abs() < 1e-12);
}

#[test]
fn swapping_reward_source_keeps_transitions() {
    let mut env = DoorKeyEnv::new();
    let spec = FeatureSpec::new("doorkey", env.spec().feature_dim, 1).unwrap();
    let model = RewardModel {
        params: MlpParams::random(spec.input_dim(), &[8], 5).unwrap(),
        spec,
        standardize: None,
    };
    let bt = RewardSource::BtModel(BtReward::new(model));
    let actions: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 5).collect();
    let mut replay = |source: &RewardSource| {
        let mut obs_log = Vec::new();
        let mut rewards = Vec::new();
        let first = env.reset(11);
        let mut stream = source.start_episode(&first);
        for &a in &actions {
            if env.is_done() {
                break;
            }
            let out = env.step(a).unwrap();
            rewards.push(stream.reward(&out, 0.99).unwrap());
            obs_log.push(out.obs);
        }
        (obs_log, rewards)
    };
    let (obs_env, r_env) = replay(&RewardSource::Env);
    let (obs_bt, r_bt) = replay(&bt);
    assert_eq!(obs_env, obs_bt);
    assert_ne!(r_env, r_bt);
}

#[test]
fn bt_window_pads_short_histories() {
    let mut env = RepeatCorridor::new();
    let dim = env.spec().feature_dim;
    let spec = FeatureSpec::new("corridor", dim, 3).unwrap();
    let bt = BtReward::new(RewardModel {
        params: MlpParams::zeros(spec.input_dim(), &[4]).unwrap(),
        spec,
        standardize: None,
    });
    let o = env.reset(1);
    let x = bt.features(std::slice::from_ref(&o)).unwrap();
    assert_eq!(x.len(), 3 * dim);
    assert_eq!(&x[..dim], &o.features[..]);
    assert_eq!(&x[2 * dim..], &o.features[..]);
}

#[test]
fn mc_examples() {
    let mut env = TabularEnv::new(reward_chain(4, 0.5), "chain").unwrap();
    env.reset(0);
    let est = mc_value_estimate(&[env.clone()], &mut RandomPolicy, 10, 0.5, 1).unwrap();
    assert_eq!(est[0].value, 1.75);
    assert_eq!(est[0].stderr, 0.0);

    // stochastic returns: stderr^2 scales like 1/n
    let mdp = bundled("chain5").unwrap();
    let gamma = mdp.gamma;
    let mut env = TabularEnv::new(mdp, "chain5").unwrap();
    env.reset(0);
    env.set_state(0);
    let small = mc_value_estimate(&[env.clone()], &mut RandomPolicy, 4000, gamma, 2).unwrap()[0];
    let large = mc_value_estimate(&[env.clone()], &mut RandomPolicy, 8000, gamma, 3).unwrap()[0];
    let ratio = large.stderr.powi(2) / small.stderr.powi(2);
    assert!((ratio - 0.5).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn zero_learning_rate_leaves_policy_unchanged() {
    let mut env = DoorKeyEnv::new();
    let cfg = AcConfig {
        total_steps: 2000,
        actor_lr: 0.0,
        critic_lr: 0.0,
        norm_sample_steps: 200,
        checkpoint_steps: vec![0],
        ..Default::default()
    };
    let out = actor_critic_train(&mut env, &RewardSource::Env, &cfg).unwrap();
    assert_eq!(out.checkpoints[0].model, out.model);
    assert_eq!(out.steps, 2000);
}

#[test]
fn actor_critic_is_deterministic() {
    let mut env = RepeatCorridor::new();
    let cfg = AcConfig {
        total_steps: 3000,
        norm_sample_steps: 100,
        ..Default::default()
    };
    let a = actor_critic_train(&mut env, &RewardSource::Env, &cfg).unwrap();
    let b = actor_critic_train(&mut env, &RewardSource::Env, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn actor_critic_learns_two_state() {
    let mut env = TabularEnv::new(two_state(0.9), "two")
        .unwrap()
        .with_max_steps(20);
    let cfg = AcConfig {
        total_steps: 5000,
        actor_lr: 3e-3,
        gamma: 0.9,
        norm_sample_steps: 0,
        success_window: 20,
        ..Default::default()
    };
    let out = actor_critic_train(&mut env, &RewardSource::Env, &cfg).unwrap();
    let p = out.model.action_probs(&env.reset(0).features).unwrap();
    assert!(p[0] > 0.9, "{p:?}");
    assert!(steps_to_success(&out.metrics, 0.9, 20).is_some());
}

#[test]
fn metrics_csv_columns() {
    let mut t = MetricsTracker::new(2);
    t.push(5, 5, 1.0, 1.0);
    t.push(9, 4, 0.0, -1.0);
    t.push(12, 3, 0.0, 0.0);
    assert_eq!(t.metrics[1].success_rate, 0.5);
    assert_eq!(t.metrics[2].success_rate, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&t.metrics, "env", 7, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,episode,success_rate,mean_return,reward_source,seed"
    );
    assert_eq!(text.lines().nth(1).unwrap(), "5,0,1.0,1.0,env,7");
    assert_eq!(steps_to_success(&t.metrics, 0.5, 2), Some(9));
}

#[test]
fn rollouts_are_reproducible() {
    let mut env = DoorKeyEnv::new();
    let a = rollouts(&mut env, &mut RandomPolicy, 3, 9).unwrap();
    let b = rollouts(&mut env, &mut RandomPolicy, 3, 9).unwrap();
    assert_eq!(a, b);
    for t in &a {
        t.validate().unwrap();
    }
}

#[test]
fn trainer_in_chunks_continues_metrics() {
    let cfg = AcConfig {
        total_steps: 3000,
        norm_sample_steps: 100,
        ..Default::default()
    };
    let mut env = TabularEnv::new(two_state(0.9), "tabular:two_state").unwrap();
    let mut trainer = AcTrainer::new(&mut env, &cfg).unwrap();
    trainer
        .train_until(&mut env, &RewardSource::Env, 1000)
        .unwrap();
    assert_eq!(trainer.steps(), 1000);
    let first = trainer.metrics().len();
    trainer
        .train_until(&mut env, &RewardSource::Env, 10_000)
        .unwrap();
    let out = trainer.finish();
    assert_eq!(out.steps, 3000);
    assert!(out.metrics.len() > first);
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.episode, i);
    }
    assert!(out.metrics.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn potential_bt_reward_telescopes() {
    let spec = FeatureSpec::new("corridor", 3, 1).unwrap();
    let params = MlpParams::random(3, &[4], 9).unwrap();
    let mut bt = BtReward::new(RewardModel {
        spec,
        params,
        standardize: None,
    });
    bt.potential = true;
    bt.coef = 2.0;
    let obs = |i: u64, x: f64| crate::types::Observation {
        env_id: "corridor".into(),
        episode_id: "e".into(),
        step_index: i,
        text_render: String::new(),
        features: vec![x, 1.0 - x, 0.5],
        state_key: format!("{i}"),
    };
    let hist = vec![obs(0, 0.1), obs(1, 0.7)];
    let phi = |o: &crate::types::Observation| bt.model.reward_features(&o.features).unwrap();
    let expected = 2.0 * (0.9 * phi(&hist[1]) - phi(&hist[0]));
    assert!((bt.reward(&hist, 0.0, 0.9).unwrap() - expected).abs() < 1e-12);
}
