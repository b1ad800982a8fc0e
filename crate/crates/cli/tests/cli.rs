mod common;

use std::fs;

use common::{code, mlp, permuted_config, run, s, write_config};
use serde_json::{json, Value};
use sidetune::tasks::read_idx;
use sidetune_cli::output::read_rows;

#[test]
fn single_task_run_writes_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1,
        "sequence": {"family": "rotated_regression", "num_tasks": 1},
        "base": {"arch": mlp(8, &[16, 4], "base")},
        "strategies": [{"name": "st", "strategy": {"kind": "sidetune"}}],
        "budget": {"steps": 20, "batch_size": 16, "lr": 0.01}
    });
    let path = write_config(dir.path(), "toy.json", &cfg);
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(&fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0].task_trained, rows[0].task_evaled, rows[0].metric_kind.as_str()),
        (0, 0, "loss")
    );
    assert_eq!(rows[0].run_id, "st-s0");
}

#[test]
fn outputs_stay_under_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([{"name": "st", "strategy": {"kind": "sidetune"}}]);
    let mut cfg = permuted_config(2, strategies, 20);
    cfg["rigidity"] = json!(true);
    let path = write_config(dir.path(), "exp.json", &cfg);
    let out = dir.path().join("nested").join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut top: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["exp.json", "nested"]);
    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoints", "manifest.json", "results.csv", "rigidity.csv"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for rel in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(rel.as_str().unwrap()).is_file(), "{rel}");
    }
    assert!(manifest["rigidity_definition"]
        .as_str()
        .unwrap()
        .starts_with("rigidity_ln = ln("));
    let rig = read_rows(&fs::read_to_string(out.join("rigidity.csv")).unwrap()).unwrap();
    assert_eq!(rig.len(), 2);
    assert!(rig.iter().all(|r| r.metric_kind == "rigidity_ln" && r.value == 0.0));
}

#[test]
fn ewc_lambda_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([{"name": "ewc", "strategy": {"kind": "ewc", "lambda": 1e5}}]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(2, strategies, 10));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["config"]["strategies"][0]["strategy"]["lambda"].as_f64(),
        Some(100000.0)
    );
    assert_eq!(manifest["strategies"][0]["kind"], "ewc");
    assert_eq!(manifest["partial"], false);
}

#[test]
fn manifest_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([
        {"name": "st", "strategy": {"kind": "sidetune", "merge": "film"}},
        {"name": "ft", "strategy": {"kind": "finetune"}}
    ]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(3, strategies, 30));
    let first = dir.path().join("first");
    assert_eq!(
        code(&run(&["run", "--config", s(&path), "--out", s(&first), "--seed", "11"])),
        0
    );
    let manifest: Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    let mut echo = manifest["config"].clone();
    let second = dir.path().join("second");
    echo["out"] = json!(second.to_str().unwrap());
    let again = write_config(dir.path(), "echo.json", &echo);
    assert_eq!(code(&run(&["run", "--config", s(&again)])), 0);
    assert_eq!(
        fs::read(first.join("results.csv")).unwrap(),
        fs::read(second.join("results.csv")).unwrap()
    );
}

#[test]
fn misspelled_key_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([{"name": "st", "strategy": {"kind": "sidetune", "mrege": "film"}}]);
    let path = write_config(dir.path(), "bad.json", &permuted_config(2, strategies, 10));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mrege"));
    assert!(!out.exists());
    let o = run(&["run", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["run"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_run_is_flagged_partial() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([
        {"name": "st", "strategy": {"kind": "sidetune"}},
        {"name": "boom", "strategy": {"kind": "finetune"},
         "budget": {"steps": 20, "batch_size": 32, "lr": 1e300, "optimizer": "sgd"}}
    ]);
    let cfg = json!({
        "schema_version": 1,
        "sequence": {"family": "rotated_regression", "num_tasks": 2},
        "base": {"arch": mlp(8, &[16, 4], "base")},
        "strategies": strategies,
        "budget": {"steps": 20, "batch_size": 32, "lr": 0.01}
    });
    let path = write_config(dir.path(), "exp.json", &cfg);
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["partial"], true);
    assert_eq!(manifest["strategies"][0]["partial"], false);
    assert_eq!(manifest["strategies"][1]["partial"], true);
    assert!(manifest["strategies"][1]["error"]
        .as_str()
        .unwrap()
        .contains("non-finite"));
    let rows = read_rows(&fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().filter(|r| r.strategy == "st").count(), 3);
}

#[test]
fn compare_rejects_heterogeneous_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([
        {"name": "a", "strategy": {"kind": "sidetune"}},
        {"name": "b", "strategy": {"kind": "sidetune"}, "budget": {"steps": 5, "batch_size": 32, "lr": 0.01}}
    ]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(2, strategies, 10));
    let o = run(&["compare", "--config", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn identical_strategies_rank_symmetrically() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([
        {"name": "a", "strategy": {"kind": "sidetune"}, "replicate": 0},
        {"name": "b", "strategy": {"kind": "sidetune"}, "replicate": 1}
    ]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(4, strategies, 60));
    let out = dir.path().join("out");
    let o = run(&[
        "compare",
        "--config",
        s(&path),
        "--out",
        s(&out),
        "--seeds",
        "10",
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("compare.csv")).unwrap();
    let ranks: Vec<f64> = r.records().map(|rec| rec.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(ranks.len(), 2);
    assert!((ranks[0] + ranks[1] - 3.0).abs() < 1e-12);
    for rank in ranks {
        assert!((rank - 1.5).abs() < 0.25, "rank {rank}");
    }
}

#[test]
fn plot_is_deterministic_and_flat_for_sidetune() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([{"name": "st", "strategy": {"kind": "sidetune"}}]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(5, strategies, 40));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["run", "--config", s(&path), "--out", s(&out)])), 0);
    let csv = out.join("results.csv");
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    assert_eq!(code(&run(&["plot", "--input", s(&csv), "--out", s(&p1)])), 0);
    assert_eq!(code(&run(&["plot", "--input", s(&csv), "--out", s(&p2)])), 0);
    for name in ["curves.svg", "forgetting.svg", "rigidity.svg"] {
        assert_eq!(
            fs::read(p1.join(name)).unwrap(),
            fs::read(p2.join(name)).unwrap(),
            "{name}"
        );
    }
    let svg = fs::read_to_string(p1.join("curves.svg")).unwrap();
    let curves: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="curve""#)).collect();
    assert_eq!(curves.len(), 5);
    for line in curves {
        let points = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        let ys: Vec<&str> = points.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]), "not flat: {line}");
    }
}

#[test]
fn plot_handles_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("plots");
    assert_eq!(code(&run(&["plot", "--input", s(&empty), "--out", s(&out)])), 0);
    assert!(fs::read_to_string(out.join("curves.svg")).unwrap().contains("no data"));

    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        "run_id,strategy,task_trained,task_evaled,metric_kind,value,seed,step_budget\n\
         a-s0,a,0,0,loss,0.5,0,10\n\
         a-s0,a,1,zero,loss,0.5,0,10\n",
    )
    .unwrap();
    let o = run(&["plot", "--input", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_data_round_trips_through_idx_config() {
    let dir = tempfile::tempdir().unwrap();
    let strategies = json!([{"name": "st", "strategy": {"kind": "sidetune"}}]);
    let path = write_config(dir.path(), "exp.json", &permuted_config(2, strategies, 20));
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--config", s(&path), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&data).unwrap().count(), 8);
    let arr = read_idx(&fs::read(data.join("task1-val-inputs.idx")).unwrap()).unwrap();
    assert_eq!(arr.dims, [128, 16]);

    let mut cfg = permuted_config(1, strategies_json(), 20);
    cfg["sequence"] = json!({
        "family": "idx", "num_tasks": 2,
        "train_images": "data/task0-train-inputs.idx", "train_labels": "data/task0-train-labels.idx",
        "val_images": "data/task0-val-inputs.idx", "val_labels": "data/task0-val-labels.idx"
    });
    let path = write_config(dir.path(), "idx.json", &cfg);
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(&fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);

    fs::write(data.join("task0-val-labels.idx"), [0u8, 0, 8, 1, 0, 0, 0, 9, 1]).unwrap();
    let o = run(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
}

fn strategies_json() -> Value {
    json!([{"name": "st", "strategy": {"kind": "sidetune"}}])
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["grad-check", "--seeds", "2", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    assert!(dir.path().join("gradcheck.csv").is_file());
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        sidetune_cli::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}
