use std::fs;
use std::process::{Command, Output};

fn coagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coagent")).args(args).output().unwrap()
}

fn bundled_json(name: &str) -> serde_json::Value {
    let out = coagent(&["show", name]);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn lists_bundled_configs() {
    let out = coagent(&["list"]);
    assert!(out.status.success());
    let names = String::from_utf8(out.stdout).unwrap();
    for name in ["gridworld_gradcheck", "gridworld_train", "comdp_verify", "reduce_verify", "option_critic"] {
        assert!(names.lines().any(|l| l == name), "{name} missing from {names}");
    }
}

#[test]
fn verify_run_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = coagent(&["run", "comdp_verify", "--trials", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("status=pass"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["trials"], 1);
    assert_eq!(manifest["passed"], true);
    for f in manifest["files"].as_array().unwrap() {
        assert!(out_dir.join(f.as_str().unwrap()).exists());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = coagent(&["run", "gridworld_train", "--trials", "2", "--seed", "5", "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn missing_seed_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = bundled_json("comdp_verify");
    config.as_object_mut().unwrap().remove("seed");
    let path = dir.path().join("no_seed.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = coagent(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("seed"));
}

#[test]
fn invalid_value_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = bundled_json("gridworld_train");
    config["train"]["lambda"] = 1.5.into();
    let path = dir.path().join("bad_lambda.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = coagent(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("lambda"));
}

#[test]
fn unknown_config_exits_one() {
    let out = coagent(&["run", "no_such_config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("no_such_config"));
}

#[test]
fn non_absorbing_mdp_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = bundled_json("reduce_verify");
    // state 0 loops on itself and never reaches the terminal state
    config["mdp"] = serde_json::json!({
        "kind": "tables", "n_states": 2, "n_actions": 1, "discount": 1.0, "reward_support": [-1.0, 0.0],
        "transitions": [{"s": 0, "a": 0, "next": 0, "prob": 1.0, "rewards": [1.0, 0.0]},
                        {"s": 1, "a": 0, "next": 1, "prob": 1.0, "rewards": [0.0, 1.0]}],
        "initial": [1.0, 0.0], "terminal": [1]
    });
    config["network"] = serde_json::json!({"coagents": [{"id": 0, "output_arity": 1, "uses_state": true}], "action_coagent": 0});
    let path = dir.path().join("loop.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = coagent(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
