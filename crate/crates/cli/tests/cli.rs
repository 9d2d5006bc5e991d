use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn textseries(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textseries"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = textseries(dir.path(), &["generate", "--out", "syn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn build_is_idempotent_and_ablation_has_every_cell() {
    let dir = generated();
    let cwd = dir.path();
    let first = textseries(cwd, &["build-dataset", "--config", "syn/config.json", "--provider", "mock"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let manifest = fs::read_to_string(cwd.join("syn/run/dataset/manifest.json")).unwrap();

    let again = textseries(cwd, &["build-dataset", "--config", "syn/config.json", "--provider", "mock"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stderr(&again).contains("provider calls: llm 0 "), "{}", stderr(&again));
    assert!(stderr(&again).contains("embedding 0"), "{}", stderr(&again));
    assert_eq!(first.stdout, again.stdout);
    assert_eq!(manifest, fs::read_to_string(cwd.join("syn/run/dataset/manifest.json")).unwrap());

    let o = textseries(cwd, &["ablate", "--config", "syn/config.json", "--plan", "multilevel", "--seed", "1,2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cells = fs::read_dir(cwd.join("syn/run/ablate/multilevel/cells")).unwrap().count();
    assert_eq!(cells, 7 * 2);
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 7);

    let o = textseries(cwd, &["report", "--config", "syn/config.json", "--plan", "multilevel"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = generated();
    let cwd = dir.path();
    let filters = ["--config", "syn/config.json", "--ticker", "QNTX", "--from", "2019-01-01"];
    for stage in ["ingest", "parse-filings", "classify", "finetune-embedding", "retrieve", "summarize"] {
        let mut args = vec![stage];
        args.extend(filters);
        let o = textseries(cwd, &args);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let manifest = fs::read_to_string(cwd.join("syn/run/dataset/manifest.json")).unwrap();
    assert!(manifest.contains("QNTX") && !manifest.contains("HELM"));
}

#[test]
fn summarize_without_upstream_outputs_fails_validation() {
    let dir = generated();
    let o = textseries(dir.path(), &["summarize", "--config", "syn/config.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(textseries(dir.path(), &["frobnicate"]).status.code(), Some(64));
    assert_eq!(textseries(dir.path(), &["ingest", "--config", "c.json", "--bogus"]).status.code(), Some(64));
    assert_eq!(textseries(dir.path(), &["ablate", "--config", "c.json", "--plan", "nope"]).status.code(), Some(64));
    assert_eq!(textseries(dir.path(), &[]).status.code(), Some(64));
    assert_eq!(textseries(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = textseries(dir.path(), &["ingest", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_provider_exits_2() {
    let dir = generated();
    let cwd = dir.path();
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cwd.join("syn/config.json")).unwrap()).unwrap();
    let endpoint = serde_json::json!({
        "endpoint_url": "http://127.0.0.1:9/v1",
        "api_key_env": "TEXTSERIES_TEST_KEY",
        "timeout_s": 2.0,
        "backoff_ms": 0
    });
    config["provider"] = "real".into();
    config["llm"] = endpoint.clone();
    config["embedding"] = endpoint;
    fs::write(cwd.join("syn/real.json"), config.to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_textseries"))
        .current_dir(cwd)
        .env("TEXTSERIES_TEST_KEY", "k")
        .args(["parse-filings", "--config", "syn/real.json", "--ticker", "QNTX"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
