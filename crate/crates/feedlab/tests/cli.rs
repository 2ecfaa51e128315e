use std::path::Path;
use std::process::{Command, Output};

use feedlab_core::model::{FeedPage, Post};
use feedlab_core::payload::{serialize_feed_payload, MOCK_FORMAT_ID};
use feedlab_core::plan::shipped_plan;

fn feedlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedlab")).args(args).env_remove("FEEDLAB_CONFIG").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample_payload(dir: &Path) -> (std::path::PathBuf, Vec<u8>) {
    let posts = vec![
        Post::new("a", "acct1", "the election results are in", 1_000),
        Post::new("b", "acct2", "a photo of my cat", 2_000),
        Post::new("c", "acct3", "senate vote tonight", 3_000),
    ];
    let bytes = serde_json::to_vec_pretty(
        &serde_json::from_slice::<serde_json::Value>(&serialize_feed_payload(&FeedPage::new("next", posts), MOCK_FORMAT_ID).unwrap()).unwrap(),
    )
    .unwrap();
    let path = dir.join("page.json");
    std::fs::write(&path, &bytes).unwrap();
    (path, bytes)
}

#[test]
fn help_lists_every_subcommand() {
    let o = feedlab(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["serve", "mock", "simulate", "replay", "report", "export", "validate-plan", "compact", "withdraw"] {
        assert!(text.contains(sub), "--help lacks {sub}");
    }
    assert!(feedlab(&["replay", "--help"]).status.success());
}

#[test]
fn identity_replay_reports_no_actions_and_keeps_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (payload, bytes) = sample_payload(dir.path());
    let o = feedlab(&["replay", payload.to_str().unwrap(), "identity"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("0 actions"), "{}", stderr(&o));
    assert_eq!(o.stdout, bytes);
}

#[test]
fn downrank_replay_lists_deferrals() {
    let dir = tempfile::tempdir().unwrap();
    let (payload, _) = sample_payload(dir.path());
    let out = dir.path().join("out.json");
    let o = feedlab(&["replay", payload.to_str().unwrap(), "downrank_political", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stderr(&o);
    assert!(summary.starts_with("2 actions"), "{summary}");
    assert!(summary.contains("downranked a 0 -> deferred until position 101"), "{summary}");
    assert!(summary.contains("downranked c 2 -> deferred until position 103"), "{summary}");
    let delivered: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(delivered["posts"].as_array().unwrap().len(), 1);
}

#[test]
fn validate_plan_names_the_violation() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = shipped_plan("downrank_political").unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, plan.to_json_pretty()).unwrap();
    plan.target.threshold = Some(1.5);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, plan.to_json_pretty()).unwrap();

    let o = feedlab(&["validate-plan", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("ok "));

    let o = feedlab(&["validate-plan", good.to_str().unwrap(), bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("threshold"), "{}", stdout(&o));
    assert!(stdout(&o).contains("1.5"), "{}", stdout(&o));
}

#[test]
fn simulate_repeats_with_the_same_seed() {
    let run = || {
        let o = feedlab(&["simulate", "--cohort", "10", "--seed", "1", "--json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let arms: Vec<_> = v["arms"].as_object().unwrap().iter().map(|(k, a)| (k.clone(), a["participants"].clone(), a["records"].clone())).collect();
        (arms, v["duplicates_sent"].clone())
    };
    let first = run();
    assert_eq!(first.0.iter().map(|(_, p, _)| p.as_u64().unwrap()).sum::<u64>(), 10);
    assert_eq!(first, run());
}

#[test]
fn report_export_and_withdraw_work_on_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let o = feedlab(&["report", "--data-dir", d, "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("group,"), "{}", stdout(&o));
    let o = feedlab(&["withdraw", "P-nobody", "--data-dir", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = feedlab(&["compact", "--data-dir", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("export");
    let o = feedlab(&["export", "--data-dir", d, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = feedlab(&["report", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}
