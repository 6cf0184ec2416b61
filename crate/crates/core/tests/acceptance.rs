//! End-to-end acceptance suite. Every test prints one `PASS`/`FAIL` line
//! before asserting; run with `--nocapture` to see them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefrl::agents::{llm_act, AgentContext, AgentPromptConfig};
use prefrl::annotate::*;
use prefrl::config::ExperimentConfig;
use prefrl::envs::corridor::RepeatCorridor;
use prefrl::envs::doorkey::DoorKeyEnv;
use prefrl::envs::tabular::{bundled, TabularEnv, TabularMdp};
use prefrl::envs::wordle::near_optimal_value;
use prefrl::envs::{Environment, NearOptimalWordle, WordleEnv, WordleVariant};
use prefrl::eval::{collect_probe_states, median, pearson};
use prefrl::llm::stub::{StubReply, StubServer};
use prefrl::llm::{ChatApi, LlmClient, LlmConfig};
use prefrl::nn::Mlp;
use prefrl::pipeline::{run_pipeline, PipelineOptions, PipelineSummary};
use prefrl::probes::*;
use prefrl::rewardcode::{parse_reward_expr, BinOp, Expr, FeatureEnvMap, Func, RewardExpr};
use prefrl::rewardmodel::*;
use prefrl::rl::tabular::{greedy_policy, policy_evaluation_exact, value_iteration, TabularPolicy};
use prefrl::rl::*;
use prefrl::shaping::{count_transform, reshape_mdp, EpisodicCountTable, HurlConfig};
use prefrl::{Label, Observation, ObservationWindow, PreferenceRecord};

fn verdict(n: u32, ok: bool, detail: String, started: Instant) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!(
        "{tag} criterion {n}: {detail} ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    assert!(ok, "criterion {n}: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_file(&config_path(name)).unwrap()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_bt_loss_closed_forms() {
    let t = Instant::now();
    let ln2 = std::f64::consts::LN_2;
    let cases = [
        (0.0, 0.0, Label::A, ln2),
        (0.0, 0.0, Label::Tie, ln2),
        (3f64.ln(), 0.0, Label::A, 0.287682072451781),
    ];
    // a one-weight linear model reproduces the rewards from a scalar input
    let identity = MlpParams::new(
        Mlp::from_layers(vec![prefrl::nn::Layer {
            rows: 1,
            cols: 1,
            w: vec![1.0],
            b: vec![0.0],
        }])
        .unwrap(),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (ra, rb, label, expect) in cases {
        worst = worst.max((bt_pair_loss(ra - rb, label) - expect).abs());
        let batch = [BtExample::new(vec![ra], vec![rb], label)];
        worst = worst.max((bt_loss(&batch, &identity).unwrap() - expect).abs());
    }
    verdict(1, worst < 1e-9, format!("max abs error {worst:.2e}"), t);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_gradient_matches_finite_differences() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for net_i in 0..100u64 {
        let input = rng.gen_range(1..=6);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=2))
            .map(|_| rng.gen_range(2..=8))
            .collect();
        let params = MlpParams::random(input, &hidden, 100 + net_i).unwrap();
        let batch: Vec<BtExample> = (0..rng.gen_range(1..=8))
            .map(|_| {
                let x = |rng: &mut ChaCha8Rng| {
                    (0..input)
                        .map(|_| rng.gen_range(-2.0..2.0))
                        .collect::<Vec<f64>>()
                };
                let label = [Label::A, Label::B, Label::Tie][rng.gen_range(0..3)];
                BtExample::new(x(&mut rng), x(&mut rng), label)
            })
            .collect();
        let analytic = bt_loss_grad(&batch, &params).unwrap().flat();
        let flat = params.net().flat();
        for i in 0..flat.len() {
            let mut probe = params.clone();
            let mut v = flat.clone();
            v[i] = flat[i] + h;
            probe.net_mut().set_flat(&v).unwrap();
            let up = bt_loss(&batch, &probe).unwrap();
            v[i] = flat[i] - h;
            probe.net_mut().set_flat(&v).unwrap();
            let down = bt_loss(&batch, &probe).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs());
            // below this the difference quotient is dominated by rounding
            if scale < 1e-6 {
                skipped += 1;
                continue;
            }
            checked += 1;
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    verdict(
        2,
        worst < 1e-4 && checked > 0,
        format!(
            "max relative error {worst:.2e} over {checked} partials ({skipped} near-zero skipped)"
        ),
        t,
    );
}

// ---------------------------------------------------------------- 3

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
fn criterion_03_count_transform_exact() {
    let t = Instant::now();
    let r = 0.6;
    let mut table = EpisodicCountTable::new();
    let first: Vec<f64> = (0..3)
        .map(|_| count_transform(r, "s", &mut table, 3.0))
        .collect();
    table.reset();
    let after_reset = count_transform(r, "s", &mut table, 3.0);
    let mut ok = first == vec![r, r / 8.0, r / 27.0] && after_reset == r;

    // the same through the shaped reward stream over two episodes
    let mut env = two_cell_loop();
    let source = RewardSource::shaped(RewardSource::Env, Shaping::Count { beta: 3.0 });
    let cfg = QConfig {
        episodes: 2,
        log_rewards: true,
        ..Default::default()
    };
    let out = q_learning(&mut env, &source, &cfg).unwrap();
    let expect = [
        1.0,
        1.0 / 8.0,
        1.0 / 8.0,
        1.0 / 27.0,
        1.0 / 27.0,
        1.0 / 64.0,
    ];
    ok &= out.rewards.len() == 2 && out.rewards.iter().all(|ep| ep.as_slice() == expect);
    verdict(
        3,
        ok,
        format!("visits 1-3 give {first:?}, after reset {after_reset}"),
        t,
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_hurl_identities() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for name in ["two_state", "chain5", "gridworld"] {
        let mdp = bundled(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<f64> = (0..mdp.n_states)
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let reshaped = reshape_mdp(&mdp, &HurlConfig::for_mdp(&mdp, 1.0, h).unwrap()).unwrap();
        let v = value_iteration(&mdp, 1e-12).unwrap().values;
        let v_tilde = value_iteration(&reshaped, 1e-12).unwrap().values;
        let pi = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
        let vp = policy_evaluation_exact(&mdp, &pi, 1e-12).unwrap();
        let vp_tilde = policy_evaluation_exact(&reshaped, &pi, 1e-12).unwrap();
        for (a, b) in v.iter().zip(&v_tilde).chain(vp.iter().zip(&vp_tilde)) {
            worst = worst.max((a - b).abs());
        }
    }
    let chain = bundled("chain5").unwrap();
    let solved = value_iteration(&chain, 1e-12).unwrap();
    let myopic = reshape_mdp(
        &chain,
        &HurlConfig::for_mdp(&chain, 0.0, solved.values.clone()).unwrap(),
    )
    .unwrap();
    let one_step = greedy_policy(&myopic, &vec![0.0; chain.n_states]);
    let same_policy = one_step == solved.policy;
    verdict(
        4,
        worst < 1e-8 && same_policy,
        format!(
            "lambda=1 max value gap {worst:.2e}; lambda=0 greedy {one_step:?} vs optimal {:?}",
            solved.policy
        ),
        t,
    );
}

// ---------------------------------------------------------------- 5, 6b, 10

struct DoorKeyRuns {
    bt: Vec<PipelineSummary>,
    env: Vec<PipelineSummary>,
    seed0_dir: tempfile::TempDir,
    elapsed: Duration,
}

const DOORKEY_SEEDS: u64 = 10;

fn run_seeded(cfg: &ExperimentConfig, seed: u64) -> (PipelineSummary, tempfile::TempDir) {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let dir = tempfile::tempdir().unwrap();
    let opts = PipelineOptions {
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    (run_pipeline(&cfg, &opts).unwrap(), dir)
}

fn doorkey_runs() -> &'static DoorKeyRuns {
    static RUNS: OnceLock<DoorKeyRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let oracle = load_config("doorkey_oracle.toml");
        let sparse = load_config("doorkey_env.toml");
        let mut bt = Vec::new();
        let mut env = Vec::new();
        let mut seed0_dir = None;
        for seed in 0..DOORKEY_SEEDS {
            let (summary, dir) = run_seeded(&oracle, seed);
            bt.push(summary);
            if seed == 0 {
                seed0_dir = Some(dir);
            }
            env.push(run_seeded(&sparse, seed).0);
        }
        DoorKeyRuns {
            bt,
            env,
            seed0_dir: seed0_dir.unwrap(),
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn criterion_05_doorkey_credit_assignment() {
    let t = Instant::now();
    let runs = doorkey_runs();
    let first = &runs.bt[0];
    let val_acc = first.reward_model_val_accuracy.unwrap_or(0.0);
    let peaks = first.trace_peaks.clone().unwrap_or_default();
    // runs that never reach the threshold count as one step past their budget
    let budget = |cfg: &str| load_config(cfg).rl.a2c.total_steps + 1;
    let to_success = |runs: &[PipelineSummary], cfg: &str| -> Vec<f64> {
        runs.iter()
            .map(|s| s.steps_to_success.unwrap_or(budget(cfg)) as f64)
            .collect()
    };
    let bt_steps = to_success(&runs.bt, "doorkey_oracle.toml");
    let env_steps = to_success(&runs.env, "doorkey_env.toml");
    let bt_reached = runs
        .bt
        .iter()
        .filter(|s| s.steps_to_success.is_some())
        .count();
    let (bt_med, env_med) = (median(&bt_steps).unwrap(), median(&env_steps).unwrap());
    let ratio = bt_med / env_med;
    let a = val_acc >= 0.95;
    let b = peaks.episodes == 10 && peaks.all_events_peak >= 8;
    let c = bt_reached * 2 > bt_steps.len() && ratio <= 0.5;
    verdict(
        5,
        a && b && c,
        format!(
            "(a) val acc {val_acc:.3}; (b) peaks {}/{}; (c) median steps to 0.9: bt {bt_med:.0} vs env {env_med:.0}, ratio {ratio:.2}; seed 0 final success {:.2} [{} seeds, shared runs {:.0}s]",
            peaks.all_events_peak,
            peaks.episodes,
            first.final_success_rate.unwrap_or(0.0),
            DOORKEY_SEEDS,
            runs.elapsed.as_secs_f64()
        ),
        t,
    );
}

fn exact_values(
    env: &WordleEnv,
    traj: &prefrl::Trajectory,
    solver: &mut NearOptimalWordle,
    gamma: f64,
) -> Vec<(Observation, f64)> {
    let mut e = env.clone();
    let first = e.reset(traj.seed);
    let mut out = vec![(
        first,
        near_optimal_value(solver, e.state(), env.words(), gamma).unwrap(),
    )];
    for tr in &traj.transitions {
        let step = e.step(tr.action_id).unwrap();
        out.push((
            step.obs,
            near_optimal_value(solver, e.state(), env.words(), gamma).unwrap(),
        ));
    }
    out
}

fn near_optimal(epsilon: f64) -> impl Policy<WordleEnv> {
    let mut solver = NearOptimalWordle::new();
    EpsilonMix {
        inner: FnPolicy(move |e: &WordleEnv, _: &Observation, _: &mut ChaCha8Rng| {
            let guess = solver.guess(e.state(), e.words())?;
            e.action_of(&guess).ok_or_else(|| {
                prefrl::Error::InvalidArgument(format!("guess {guess} is not an action"))
            })
        }),
        epsilon,
    }
}

#[test]
fn criterion_06_value_correlation() {
    let t = Instant::now();
    let gamma = 0.9;
    let mut env = WordleEnv::new(WordleVariant::Wordle);
    let mut solver = NearOptimalWordle::new();
    let buffer = rollouts(&mut env, &mut near_optimal(0.5), 400, 1).unwrap();
    let mut values: HashMap<String, f64> = HashMap::new();
    for traj in &buffer {
        for (obs, v) in exact_values(&env, traj, &mut solver, gamma) {
            values.insert(obs.state_key, v);
        }
    }
    let mut annotator = ScoreAnnotator::new("value-oracle", 0.0, |w: &ObservationWindow| {
        Ok(values[&w.last().state_key])
    })
    .logistic(0.05, 17);
    let (records, _) = run_elicitation(
        &ElicitationSchedule::offline(10_000, 1),
        &buffer,
        &mut annotator,
        3,
    )
    .unwrap();
    let spec = FeatureSpec::new("wordle", env.spec().feature_dim, 1).unwrap();
    let (model, _) = train_reward_model(
        &records,
        &spec,
        &TrainConfig {
            epochs: 150,
            ..Default::default()
        },
    )
    .unwrap();
    let mut samplers = [near_optimal(0.5)];
    let probes = collect_probe_states(&mut env, &mut samplers, 300, 200, 11).unwrap();
    let mc = mc_value_estimate(&probes, &mut near_optimal(0.0), 32, gamma, 5).unwrap();
    let r: Vec<f64> = probes
        .iter()
        .map(|e| model.reward_features(&e.observe().features).unwrap())
        .collect();
    let v: Vec<f64> = mc.iter().map(|m| m.value).collect();
    let wordle_r = pearson(&r, &v).unwrap();

    let runs = doorkey_runs();
    let mut monotone = 0;
    let mut curves = Vec::new();
    for s in &runs.bt {
        let p: Vec<f64> = s.correlation.iter().map(|row| row.pearson).collect();
        if p.len() == 3 && p.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
        curves.push(
            p.iter()
                .map(|x| format!("{x:.2}"))
                .collect::<Vec<_>>()
                .join("/"),
        );
    }
    verdict(
        6,
        probes.len() == 200 && wordle_r >= 0.9 && monotone >= 8,
        format!(
            "wordle pearson {wordle_r:.3} on {} states; doorkey monotone {monotone}/{} [{}]",
            probes.len(),
            runs.bt.len(),
            curves.join(" ")
        ),
        t,
    );
}

#[test]
fn criterion_10_rerun_is_byte_identical() {
    let t = Instant::now();
    let runs = doorkey_runs();
    let (_, again) = run_seeded(&load_config("doorkey_oracle.toml"), 0);
    let a = std::fs::read(runs.seed0_dir.path().join("metrics.csv")).unwrap();
    let b = std::fs::read(again.path().join("metrics.csv")).unwrap();
    verdict(
        10,
        !a.is_empty() && a == b,
        format!("metrics.csv {} bytes, identical: {}", a.len(), a == b),
        t,
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_non_markovian_separation() {
    let t = Instant::now();
    let mut env = RepeatCorridor::new();
    let buffer = rollouts(&mut env, &mut RandomPolicy, 200, 1).unwrap();
    let (records, _) = run_elicitation(
        &ElicitationSchedule::offline(2000, 8),
        &buffer,
        &mut SequenceOracle { epsilon: 0.0 },
        3,
    )
    .unwrap();
    let mut acc = Vec::new();
    for k in [8, 1] {
        let spec = FeatureSpec::new("corridor", env.spec().feature_dim, k).unwrap();
        let cut: Vec<PreferenceRecord> = records
            .iter()
            .map(|r| PreferenceRecord {
                window_a: r.window_a.suffix(k).unwrap(),
                window_b: r.window_b.suffix(k).unwrap(),
                ..r.clone()
            })
            .collect();
        let (_, report) = train_reward_model(
            &cut,
            &spec,
            &TrainConfig {
                epochs: 60,
                ..Default::default()
            },
        )
        .unwrap();
        acc.push(report.final_val_accuracy().unwrap());
    }
    verdict(
        7,
        acc[0] >= 0.9 && acc[1] <= 0.6,
        format!("held-out accuracy k=8 {:.3}, k=1 {:.3}", acc[0], acc[1]),
        t,
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_probe_calibration() {
    let t = Instant::now();
    let cfg = ProbeConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, oracle: [ProbeReport; 2], random: [ProbeReport; 2]| {
        for r in &oracle {
            ok &= r.accuracy == 1.0 && r.n == 200;
        }
        for r in &random {
            ok &= r.n == 1000 && (r.accuracy - 0.5).abs() <= 0.05;
        }
        lines.push(format!(
            "{name} oracle {:.3}/{:.3} random {:.3}/{:.3}",
            oracle[0].accuracy, oracle[1].accuracy, random[0].accuracy, random[1].accuracy
        ));
    };
    let mut dk = DoorKeyEnv::new();
    check(
        "doorkey",
        [
            run_forward_probe(&mut dk, &mut OracleChooser, 200, 1, &cfg).unwrap(),
            run_inverse_probe(&mut dk, &mut OracleChooser, 200, 2, &cfg).unwrap(),
        ],
        [
            run_forward_probe(&mut dk, &mut RandomChooser::new(3), 1000, 3, &cfg).unwrap(),
            run_inverse_probe(&mut dk, &mut RandomChooser::new(4), 1000, 4, &cfg).unwrap(),
        ],
    );
    let mut wd = WordleEnv::new(WordleVariant::Wordle);
    check(
        "wordle",
        [
            run_forward_probe(&mut wd, &mut OracleChooser, 200, 5, &cfg).unwrap(),
            run_inverse_probe(&mut wd, &mut OracleChooser, 200, 6, &cfg).unwrap(),
        ],
        [
            run_forward_probe(&mut wd, &mut RandomChooser::new(7), 1000, 7, &cfg).unwrap(),
            run_inverse_probe(&mut wd, &mut RandomChooser::new(8), 1000, 8, &cfg).unwrap(),
        ],
    );
    verdict(
        8,
        ok,
        format!("forward/inverse accuracy: {}", lines.join("; ")),
        t,
    );
}

// ---------------------------------------------------------------- 9

fn feature_names() -> Vec<String> {
    ["key_held", "door_open", "dist_goal", "steps"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let names = feature_names();
    let leaf = prop_oneof![
        (0u32..100_000).prop_map(|v| Expr::Num(v as f64 / 100.0)),
        (0..names.len()).prop_map(move |index| Expr::Var {
            name: names[index].clone(),
            index
        }),
    ];
    leaf.prop_recursive(6, 64, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (
                prop::sample::select(BinOp::ALL.to_vec()),
                inner.clone(),
                inner.clone()
            )
                .prop_map(|(op, l, r)| {
                    Expr::Binary {
                        op,
                        lhs: Box::new(l),
                        rhs: Box::new(r),
                    }
                }),
            (
                prop::sample::select(Func::ALL.to_vec()),
                prop::collection::vec(inner, 3)
            )
                .prop_map(|(func, mut args)| {
                    args.truncate(func.arity());
                    Expr::Call { func, args }
                }),
        ]
    })
}

#[test]
fn criterion_09_reward_dsl() {
    let t = Instant::now();
    let map = FeatureEnvMap::new(feature_names()).unwrap();
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let roundtrip = runner.run(&arb_expr(), |root| {
        let expr = RewardExpr { root };
        let source = expr.to_source();
        let parsed = parse_reward_expr(&source, &map)
            .map_err(|e| TestCaseError::fail(format!("{source}: {e}")))?;
        prop_assert_eq!(&parsed, &expr);
        let again = parse_reward_expr(&parsed.to_source(), &map)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(again, parsed);
        Ok(())
    });

    let eval = |src: &str, features: &[f64]| {
        parse_reward_expr(src, &map)
            .unwrap()
            .eval_features(features)
    };
    let x = [1.0, 0.0, 2.0, 0.0];
    let a = eval("if(key_held, 0.5, 0.0)", &x);
    let b = eval("min(dist_goal, 5)/5", &x);
    let c = eval("1/0", &x);
    let examples = a.value == 0.5
        && !a.div_by_zero
        && b.value == 0.4
        && !b.div_by_zero
        && c.value == 0.0
        && c.div_by_zero;
    verdict(
        9,
        roundtrip.is_ok() && examples,
        format!(
            "10000 round-trips: {}; examples 0.5={} 0.4={} 1/0={} (flag {})",
            match &roundtrip {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
            a.value,
            b.value,
            c.value,
            c.div_by_zero
        ),
        t,
    );
}

// ---------------------------------------------------------------- 11

fn stub_client(server: &StubServer) -> LlmClient {
    let mut cfg = LlmConfig::new(server.base_url(), "test-key");
    cfg.backoff_base = Duration::from_millis(1);
    LlmClient::new(cfg).unwrap()
}

fn doorkey_windows() -> (ObservationWindow, ObservationWindow) {
    let mut env = DoorKeyEnv::new();
    let a = env.reset(3);
    let b = env.step(2).unwrap().obs;
    (ObservationWindow::single(a), ObservationWindow::single(b))
}

#[test]
fn criterion_11_llm_paths_against_stub() {
    let t = Instant::now();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let (wa, wb) = doorkey_windows();
    let query = PairQuery::new("q0", wa, wb).unwrap();
    let template = PromptTemplate::builtin("doorkey_pref").unwrap();

    // labeled on the first reply, then served from cache
    let server =
        StubServer::start(|_| StubReply::chat("the second one ... (\"best_description\": 2)"));
    let client = stub_client(&server);
    let first = annotate_llm(&query, &template, &client).unwrap();
    let second = annotate_llm(&query, &template, &client).unwrap();
    checks.push((
        "annotate parses label",
        first.label() == Some(Label::B) && second == first,
    ));
    checks.push((
        "annotate caches",
        server.request_count() == 1 && client.budget_used() == 1,
    ));

    // rate limited twice, untagged once, then tagged
    let server = StubServer::start(|req| match req.index {
        0 | 1 => StubReply::status(429, "slow down"),
        2 => StubReply::chat("thinking"),
        _ => StubReply::chat("(\"best_description\": None)"),
    });
    let client = stub_client(&server);
    let out = annotate_llm(&query, &template, &client).unwrap();
    let last = server.requests().pop().unwrap();
    checks.push((
        "annotate retries",
        out.label() == Some(Label::Tie) && server.request_count() == 4,
    ));
    checks.push((
        "reminder resent",
        last.last_message().contains("best_description"),
    ));

    let server = StubServer::start(|_| StubReply::chat("no tag at all"));
    let client = stub_client(&server);
    let out = annotate_llm(&query, &template, &client).unwrap();
    checks.push((
        "annotate discards",
        matches!(out, Annotation::Discarded { .. }) && server.request_count() == 3,
    ));

    // llm_act: one base call plus two per critique round
    let server = StubServer::start(|_| StubReply::chat("I will go ahead.\nAction: forwrd"));
    let client = stub_client(&server);
    let env = DoorKeyEnv::new();
    let ctx = AgentContext {
        task_description: "reach the goal".into(),
        action_names: env.spec().action_names.clone(),
        examples: Vec::new(),
    };
    let mut env = env;
    let obs = vec![env.reset(0)];
    let cfg = AgentPromptConfig {
        rci_rounds: 2,
        ..Default::default()
    };
    let (action, transcript) = llm_act(&obs, &[], &cfg, &ctx, &client).unwrap();
    let forward = ctx
        .action_names
        .iter()
        .position(|a| a == "forward")
        .unwrap();
    checks.push((
        "llm_act call count",
        server.request_count() == 5 && transcript.turns.len() == 5,
    ));
    checks.push((
        "llm_act projects",
        action == forward && transcript.distance == 1 && !transcript.projection_failed,
    ));

    // generation probe: one call per distinct query, matches scored by text
    let mut probe_env = DoorKeyEnv::new();
    let server = StubServer::start(|_| StubReply::chat("<next>nothing like it</next>"));
    let client: Arc<dyn ChatApi> = Arc::new(stub_client(&server));
    let mut generator = LlmGenerator {
        client: client.clone(),
        task_description: "reach the goal".into(),
    };
    let report = run_generation_probe(
        &mut probe_env,
        &mut generator,
        10,
        1,
        &ProbeConfig::default(),
    )
    .unwrap();
    let distinct = server
        .requests()
        .iter()
        .map(|r| r.body.to_string())
        .collect::<std::collections::HashSet<_>>()
        .len();
    checks.push((
        "generation calls",
        server.request_count() >= 1
            && server.request_count() <= 10
            && distinct == server.request_count(),
    ));
    checks.push((
        "generation scored",
        report.n == 10 && report.accuracy == 0.0,
    ));
    let again = run_generation_probe(
        &mut probe_env,
        &mut generator,
        10,
        1,
        &ProbeConfig::default(),
    )
    .unwrap();
    checks.push((
        "generation cached",
        again.accuracy == 0.0 && server.request_count() == distinct,
    ));

    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    verdict(
        11,
        failed.is_empty(),
        format!("{} stub checks, failed: {:?}", checks.len(), failed),
        t,
    );
}
