use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lgqave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgqave")).args(args).env("LGQAVE_THREADS", "2").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Writes a small config and synthesises its dataset under `dir`.
fn small_dataset(dir: &Path) -> String {
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "episodes = 40\nwidth = 32\nd = 16\nepochs = 2\nbatch_size = 8\nlr = 3e-3\ndata = {:?}\n",
            dir.join("data")
        ),
    )
    .unwrap();
    let config = config.to_str().unwrap().to_string();
    let o = lgqave(&["synth", "--config", &config]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &json_lines(&o)[0];
    assert_eq!(
        (summary["train"].as_u64(), summary["val"].as_u64(), summary["test"].as_u64()),
        (Some(32), Some(4), Some(4))
    );
    config
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = lgqave(&["select", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(lgqave(&[]).status.code(), Some(1));
    assert_eq!(lgqave(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "betta = 0.4\n").unwrap();
    assert_eq!(lgqave(&["select", "--config", path.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(lgqave(&["gradcheck", "--gamma", "2.0"]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lgqave(&["select", "--data", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn gradcheck_passes_on_defaults() {
    let o = lgqave(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let lines = json_lines(&o);
    let summary = lines.last().unwrap();
    assert_eq!(summary["pass"], Value::Bool(true));
    assert!(summary["max_rel_error"].as_f64().unwrap() <= 1e-3);
    assert_eq!(summary["tensors"].as_u64().unwrap() as usize, lines.len() - 1);
}

#[test]
fn select_emits_one_row_per_frame_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_dataset(dir.path());
    let o = lgqave(&["select", "--config", &config, "--beta", "0.4"]);
    assert!(o.status.success());
    let rows = json_lines(&o);
    assert_eq!(rows.len(), 4 * 32);
    for r in &rows {
        let keys: Vec<&str> = r.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["video_id", "t", "s_t", "kept"] {
            assert!(keys.contains(&k), "{r}");
        }
        assert!(r["s_t"].as_f64().unwrap().is_finite());
    }
    // every episode keeps at least its best frame
    for chunk in rows.chunks(32) {
        assert!(chunk.iter().any(|r| r["kept"] == Value::Bool(true)));
    }
    let again = lgqave(&["select", "--config", &config, "--beta", "0.4"]);
    assert_eq!(o.stdout, again.stdout);

    let all = json_lines(&lgqave(&["select", "--config", &config, "--no-sampling"]));
    assert!(all.iter().all(|r| r["kept"] == Value::Bool(true)));
}

#[test]
fn graph_rows_are_bounded_and_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_dataset(dir.path());
    let o = lgqave(&["graphs", "--config", &config, "--split", "val"]);
    assert!(o.status.success());
    let rows = json_lines(&o);
    assert!(!rows.is_empty());
    for r in rows {
        assert!(r["objects"].as_u64().unwrap() <= 10);
        assert!(r["clip"].as_u64().unwrap() < 8);
        assert!(r["row_sum_error"].as_f64().unwrap() < 1e-5);
    }
}

#[test]
fn train_then_eval_round_trips_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_dataset(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = lgqave(&["train", "--config", &config, "--out", run_s, "--deterministic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &json_lines(&o)[0];
    assert!(summary.get("elapsed_s").is_none());
    let best = summary["best_val_accuracy"].as_f64().unwrap();

    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.iter().any(|m| m.get("lr").is_some() && m.get("l_vqa").is_some()));
    assert!(lines.iter().any(|m| m.get("val_accuracy").is_some()));

    let e = lgqave(&["eval", "--config", &config, "--out", run_s, "--split", "val"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report = &json_lines(&e)[0];
    assert_eq!(report["accuracy"].as_f64().unwrap(), best);

    let again = lgqave(&["train", "--config", &config, "--out", run_s, "--deterministic"]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn ablate_prints_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_dataset(dir.path());
    let o = lgqave(&["ablate", "--config", &config, "--deterministic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("config"));
    for (line, name) in lines[1..].iter().zip(["C-1", "C-2", "C-3", "C-4", "C-5"]) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[0], name);
        assert_eq!(cols.len(), 6);
        let acc: f64 = cols[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
