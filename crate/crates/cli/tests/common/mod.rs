#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sidetune"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn mlp(input: usize, widths: &[usize], role: &str) -> Value {
    let mut layers = Vec::new();
    let mut prev = input;
    for &w in widths {
        layers.push(json!({"type": "linear", "in": prev, "out": w}));
        layers.push(json!({"type": "tanh"}));
        prev = w;
    }
    json!({"input_shape": [input], "role": role, "layers": layers})
}

/// Permuted Gaussian-mixture sequence with a pretrained 16→32→16 base.
pub fn permuted_config(num_tasks: usize, strategies: Value, steps: usize) -> Value {
    json!({
        "schema_version": 1,
        "sequence": {"family": "permuted", "num_tasks": num_tasks,
                     "source": {"train_size": 128, "val_size": 128}},
        "base": {"arch": mlp(16, &[32, 16], "base"),
                 "pretrain": {"budget": {"steps": 200, "batch_size": 32, "lr": 0.01}}},
        "strategies": strategies,
        "budget": {"steps": steps, "batch_size": 32, "lr": 0.01}
    })
}

pub fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
