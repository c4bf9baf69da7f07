use std::path::Path;
use std::process::{Command, Output};

fn mixlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlora")).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = r#"{
    "model": {"vocab_size": 16, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1,
              "n_experts": 4, "top_k": 2, "lora_rank": 2, "lora_alpha": 4.0, "max_seq_len": 32},
    "steps": 2, "batch_size": 2, "lr": 0.003, "tasks": ["copy", "parity"], "eval_samples": 8
}"#;

#[test]
fn train_then_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", TINY);
    let ckpt = dir.path().join("run.mxlr");
    let ckpt = ckpt.to_str().unwrap();

    let trained = json(&mixlora(&["train", "--config", &cfg, "--out", ckpt]));
    assert_eq!(trained["sets"].as_array().unwrap().len(), 2);
    let metrics = std::fs::read_to_string(trained["metrics"].as_str().unwrap()).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let eval = json(&mixlora(&["eval", "--ckpt", ckpt, "--task", "parity"]));
    assert_eq!(eval["task"], "parity");
    assert_eq!(eval["set"], 1);
    assert_eq!(eval["samples"], 8);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let again = json(&mixlora(&["eval", "--ckpt", ckpt, "--task", "parity"]));
    assert_eq!(eval, again);

    let routing = json(&mixlora(&["inspect-routing", "--ckpt", ckpt, "--task", "copy", "--samples", "4"]));
    assert!(!routing["routing"].as_array().unwrap().is_empty());

    // task not in the checkpoint
    let missing = mixlora(&["eval", "--ckpt", ckpt, "--task", "reverse"]);
    assert!(!missing.status.success());
}

#[test]
fn bench_reports_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", TINY);
    let report = json(&mixlora(&[
        "bench", "--config", &cfg, "--tokens", "16", "--warmup", "1", "--iters", "3", "--models", "2",
    ]));
    assert_eq!(report["entries"].as_array().unwrap().len(), 2);
    assert!((report["base_flop_ratio"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(report["sharing"].is_object());
}

#[test]
fn exit_codes_name_the_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mxlr");
    let out = out.to_str().unwrap();

    let unknown_key = write(dir.path(), "bad.json", r#"{"steps": 1, "wings": 2}"#);
    assert_eq!(mixlora(&["train", "--config", &unknown_key, "--out", out]).status.code(), Some(2));

    let bad_value = write(dir.path(), "bad2.json", r#"{"model": {"top_k": 9, "n_experts": 4}}"#);
    assert_eq!(mixlora(&["train", "--config", &bad_value, "--out", out]).status.code(), Some(2));

    let diverge = write(
        dir.path(),
        "nan.json",
        r#"{"model": {"vocab_size": 16, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1,
                      "n_experts": 2, "lora_rank": 2, "max_seq_len": 32},
            "lr": 1e200, "steps": 20, "batch_size": 2, "tasks": ["copy"]}"#,
    );
    assert_eq!(mixlora(&["train", "--config", &diverge, "--out", out]).status.code(), Some(3));

    let garbage = write(dir.path(), "garbage.mxlr", "not a checkpoint at all");
    let code = mixlora(&["eval", "--ckpt", &garbage, "--task", "copy"]).status.code();
    assert_eq!(code, Some(1));

    // clap usage errors
    assert_eq!(mixlora(&["eval", "--task", "copy"]).status.code(), Some(2));
}
