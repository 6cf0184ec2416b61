use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prefrl::llm::stub::{StubReply, StubServer};

fn prefrl(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prefrl"));
    cmd.args(args)
        .env_remove("LLM_API_KEY")
        .env_remove("LLM_BASE_URL");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn args<'a>(sub: &'a str, config: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
}

const RANDOM_ROLLOUT: &str =
    "seed = 4\n[env]\nid = \"doorkey\"\n[rollout]\npolicy = \"random\"\nepisodes = 10\n";

#[test]
fn rollout_writes_one_record_per_episode_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RANDOM_ROLLOUT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&run(&mut prefrl(&args("rollout", &cfg, &a))))).unwrap();
    assert_eq!(summary["episodes"], 10);
    ok(&run(&mut prefrl(&args("rollout", &cfg, &b))));
    let ta = std::fs::read_to_string(a.join("trajectories.jsonl")).unwrap();
    assert_eq!(ta.lines().count(), 10);
    assert_eq!(
        ta,
        std::fs::read_to_string(b.join("trajectories.jsonl")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn llm_rollout_without_key_names_the_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RANDOM_ROLLOUT.replace("\"random\"", "\"llm\""));
    let out = run(&mut prefrl(&args("rollout", &cfg, &dir.path().join("o"))));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("LLM_API_KEY"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\nid = \"doorkey\"\nmax_step = 3\n");
    let out = run(&mut prefrl(&args("pipeline", &cfg, &dir.path().join("o"))));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("unknown field") && err.contains("max_step"),
        "{err}"
    );
}

#[test]
fn dry_run_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/doorkey_oracle.toml");
    let out_dir = dir.path().join("o");
    let mut a = args("pipeline", &cfg, &out_dir);
    a.extend(["--seed", "11", "--dry-run"]);
    ok(&run(&mut prefrl(&a)));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 11);
    assert!(!out_dir.join("metrics.csv").exists());
}

#[test]
fn hurl_diagnose_on_a_tabular_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"tabular:chain5\"\n[rl]\nalgo = \"q\"\nreward = \"env\"\n",
    );
    let out_dir = dir.path().join("o");
    let rows: serde_json::Value = serde_json::from_str(&ok(&run(&mut prefrl(&args(
        "hurl-diagnose",
        &cfg,
        &out_dir,
    )))))
    .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
    let csv = std::fs::read_to_string(out_dir.join("hurl_terms.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let doorkey = write_config(dir.path(), "[env]\nid = \"doorkey\"\n");
    assert!(
        !run(&mut prefrl(&args("hurl-diagnose", &doorkey, &out_dir)))
            .status
            .success()
    );
}

#[test]
fn oracle_probe_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"doorkey\"\n[probe]\nn_queries = 50\ngeneration = true\n",
    );
    let reports: serde_json::Value = serde_json::from_str(&ok(&run(&mut prefrl(&args(
        "probe",
        &cfg,
        &dir.path().join("o"),
    )))))
    .unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r["accuracy"] == 1.0));
}

#[test]
fn elicit_then_train_from_stored_preferences() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"doorkey\"\n[elicitation]\nbatch_size = 100\nbuffer_episodes = 10\n[reward_model]\nepochs = 3\n",
    );
    let e = dir.path().join("e");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&run(&mut prefrl(&args("elicit", &cfg, &e))))).unwrap();
    assert_eq!(summary["records"], 100);
    let t = dir.path().join("t");
    let prefs = e.join("preferences.jsonl");
    let mut a = args("train-reward", &cfg, &t);
    a.extend(["--preferences", prefs.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(&ok(&run(&mut prefrl(&a)))).unwrap();
    assert_eq!(summary["records"], 100);
    assert!(t.join("reward_model.json").exists());
    assert!(!t.join("preferences.jsonl").exists());
}

#[test]
fn eval_corr_requires_probe_states() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\nid = \"doorkey\"\n");
    let out = run(&mut prefrl(&args("eval-corr", &cfg, &dir.path().join("o"))));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corr_states"));
}

#[test]
fn train_rl_with_a_dsl_reward_and_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"corridor\"\n[rl]\nalgo = \"q\"\nreward = \"dsl\"\nexpression = \"1 - visits\"\n",
    );
    let out = run(&mut prefrl(&args("train-rl", &cfg, &dir.path().join("o"))));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    assert!(
        err.contains("stage train-rl") && err.contains("unknown identifier visits"),
        "{err}"
    );
}

#[test]
fn reward_code_against_a_stub_endpoint() {
    let server = StubServer::start(|req| {
        if req.index == 0 {
            StubReply::chat("I cannot help with that.")
        } else {
            StubReply::chat("```\n3*key_held + 2*door_open - dist_goal\n```")
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"doorkey\"\n[reward_code]\nn_candidates = 2\nprobe_episodes = 5\n",
    );
    let out_dir = dir.path().join("o");

    let missing = run(&mut prefrl(&args("reward-code", &cfg, &out_dir)));
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("LLM_API_KEY"));

    let mut cmd = prefrl(&args("reward-code", &cfg, &out_dir));
    cmd.env("LLM_API_KEY", "k")
        .env("LLM_BASE_URL", server.base_url());
    let summary: serde_json::Value = serde_json::from_str(&ok(&run(&mut cmd))).unwrap();
    assert_eq!(summary["parse_failures"], 1);
    assert_eq!(summary["best_index"], 1);
    assert!(summary["best"].as_str().unwrap().contains("key_held"));
    assert_eq!(server.request_count(), 2);
    assert!(out_dir.join("reward_code.json").exists());
}

#[test]
fn rollout_of_a_trained_q_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\nid = \"tabular:chain5\"\n[rl]\nalgo = \"q\"\nreward = \"env\"\n[rl.q]\nepisodes = 300\n[rollout]\npolicy = \"q\"\nepisodes = 5\n",
    );
    let out_dir = dir.path().join("o");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&run(&mut prefrl(&args("rollout", &cfg, &out_dir))))).unwrap();
    assert_eq!(summary["episodes"], 5);
    assert!(out_dir.join("metrics.csv").exists());
    assert_eq!(
        std::fs::read_to_string(out_dir.join("trajectories.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}
