//! Acceptance criteria, each checked at its stated tolerance. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sidetune::gradsuite::{run_suite, CASES, GRAD_TOL};
use sidetune::harness::{ablation_run, median, pretrain_base, run_experiment, ExperimentSpec};
use sidetune::nets::InitScheme;
use sidetune::rng::derive_seed;
use sidetune::strategies::{
    build_strategy, deep_vs_stack, BoostConfig, BoostStack, Common, LossNorm, SharedBody, SideTune, Strategy,
    StrategyConfig, TrainBudget,
};
use sidetune::tasks::{
    gaussian_mixture, gen_permuted_tasks, gen_rotated_regression, GaussianMixtureConfig, RotatedRegressionConfig,
};
use sidetune::{AlphaCurriculum, AlphaParam, LayerSpec, MergeKind, MergeOperator, NetworkRole, NetworkSpec, Rng, Tape};
use sidetune_cli::output::read_rows;

type Check = fn() -> Result<String, String>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mlp(input: usize, widths: &[usize], role: &str) -> Value {
    let mut layers = Vec::new();
    let mut prev = input;
    for &w in widths {
        layers.push(json!({"type": "linear", "in": prev, "out": w}));
        layers.push(json!({"type": "tanh"}));
        prev = w;
    }
    json!({"input_shape": [input], "role": role, "layers": layers})
}

/// Permuted Gaussian-mixture sequence; 16→32→16 base pretrained on task 0.
fn permuted_spec(num_tasks: usize, strategies: Value, rigidity: bool) -> ExperimentSpec {
    serde_json::from_value(json!({
        "sequence": {"family": "permuted", "num_tasks": num_tasks},
        "base": {"arch": mlp(16, &[32, 16], "base"),
                 "pretrain": {"task": 0, "budget": {"steps": 300, "batch_size": 32, "lr": 0.01}}},
        "strategies": strategies,
        "budget": {"steps": 300, "batch_size": 32, "lr": 0.01},
        "rigidity": rigidity
    }))
    .expect("valid spec")
}

fn c1_gradients() -> Result<String, String> {
    let start = Instant::now();
    let cases = run_suite(0..20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("cases");
    let failing: Vec<String> = cases
        .iter()
        .filter(|c| !(c.report.pass && c.report.max_rel_error < GRAD_TOL))
        .map(|c| format!("{}@{}", c.name, c.seed))
        .collect();
    ensure(
        failing.is_empty() && cases.len() == 20 * CASES.len() && elapsed < Duration::from_secs(120),
        format!(
            "{} cases x 20 seeds, worst rel {:.2e} ({}), {:.1}s, failing {:?}",
            CASES.len(),
            worst.report.max_rel_error,
            worst.name,
            elapsed.as_secs_f64(),
            failing
        ),
    )
}

fn c2_zero_forgetting() -> Result<String, String> {
    let strategies = json!([
        {"name": "sidetune", "strategy": {"kind": "sidetune"}},
        {"name": "pnn", "strategy": {"kind": "pnn_lite"}},
        {"name": "independent", "strategy": {"kind": "independent"}},
        {"name": "finetune", "strategy": {"kind": "finetune"}}
    ]);
    let spec = permuted_spec(5, strategies, false);
    let mut nonzero = Vec::new();
    let mut ft_first = Vec::new();
    for seed in SEEDS {
        let res = run_experiment(&spec, seed, 4).map_err(|e| e.to_string())?;
        for run in &res.runs[..3] {
            let grid = &run.run.grid;
            let exact = (0..5).all(|j| {
                (j..5).all(|i| grid.get(i, j).unwrap().loss.to_bits() == grid.get(j, j).unwrap().loss.to_bits())
            });
            if !exact || run.forgetting.iter().any(|&f| f != 0.0) {
                nonzero.push(format!("{}@{seed}", run.name));
            }
        }
        ft_first.push(res.runs[3].forgetting[0]);
    }
    let med = median(&ft_first);
    ensure(
        nonzero.is_empty() && med > 0.0,
        format!("sidetune/pnn/independent nonzero: {nonzero:?}; finetune task-1 forgetting median {med:.4}"),
    )
}

fn c3_rigidity() -> Result<String, String> {
    let st = permuted_spec(5, json!([{"name": "sidetune", "strategy": {"kind": "sidetune"}}]), true);
    let ewc = permuted_spec(
        8,
        json!([{"name": "ewc", "strategy": {"kind": "ewc", "lambda": 1e5}}]),
        true,
    );
    let mut st_nonzero = Vec::new();
    let (mut r2, mut r8) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let res = run_experiment(&st, seed, 1).map_err(|e| e.to_string())?;
        let rig = res.runs[0].rigidity.clone().ok_or("missing rigidity")?;
        if rig.iter().any(|&r| r != 0.0) {
            st_nonzero.push(seed);
        }
        let res = run_experiment(&ewc, seed, 1).map_err(|e| e.to_string())?;
        let rig = res.runs[0].rigidity.clone().ok_or("missing rigidity")?;
        r2.push(rig[1]);
        r8.push(rig[7]);
    }
    let (m2, m8) = (median(&r2), median(&r8));
    ensure(
        st_nonzero.is_empty() && m8 > m2,
        format!("sidetune nonzero seeds {st_nonzero:?}; ewc(1e5) median rigidity task 2 {m2:.4}, task 8 {m8:.4}"),
    )
}

fn constant(value: f64) -> AlphaParam {
    AlphaParam::Scheduled(AlphaCurriculum::Constant { value })
}

fn c4_reductions() -> Result<String, String> {
    let ds = derive_seed(31, 0, "data");
    let cfg = GaussianMixtureConfig::default();
    let seq = gen_permuted_tasks(&gaussian_mixture(&cfg, ds).map_err(|e| e.to_string())?, 2, ds)
        .map_err(|e| e.to_string())?;
    let arch = NetworkSpec::mlp(&[16, 32, 16], LayerSpec::Tanh, true, NetworkRole::Base);
    let side_spec = NetworkSpec::mlp(&[16, 8, 16], LayerSpec::Tanh, true, NetworkRole::Side);
    let budget = TrainBudget::new(100, 32, 0.01);
    let base = pretrain_base(&arch, Some((&seq.tasks[0], &budget)), 31, LossNorm::Mse).map_err(|e| e.to_string())?;
    let common = Common::new(31);
    let task = &seq.tasks[1];

    let mut st = SideTune::new(
        &base,
        None,
        Some(InitScheme::CopyBase),
        MergeKind::AlphaBlend,
        constant(0.0),
        common,
    )
    .map_err(|e| e.to_string())?;
    let mut ft = SharedBody::finetune(&base, common).map_err(|e| e.to_string())?;
    let a = st.train_task(task, &budget).map_err(|e| e.to_string())?;
    let b = ft.train_task(task, &budget).map_err(|e| e.to_string())?;
    let loss_gap = a
        .losses
        .iter()
        .zip(&b.losses)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let side = st.side(task.task_id).ok_or("side")?;
    let param_gap = side
        .params()
        .iter()
        .zip(ft.body().params().iter())
        .flat_map(|((_, p), (_, q))| {
            p.value
                .data()
                .iter()
                .zip(q.value.data())
                .map(|(u, v)| (u - v).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    let mut rng = Rng::new(31);
    let side_net = sidetune::build_network(&side_spec, "side", &mut rng).map_err(|e| e.to_string())?;
    let op =
        MergeOperator::new(MergeKind::AlphaBlend, constant(1.0), Some(16), "m", &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let (x, _) = task.train.batch(&(0..16).collect::<Vec<_>>());
    let xv = tape.constant(x).map_err(|e| e.to_string())?;
    let bv = base.forward(&mut tape, xv).map_err(|e| e.to_string())?;
    let sv = side_net.forward(&mut tape, xv).map_err(|e| e.to_string())?;
    let r = op.forward(&mut tape, bv, sv, 0).map_err(|e| e.to_string())?;
    let loss = tape.sum(r).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let side_grad_zero = side_net
        .params()
        .iter()
        .all(|(name, _)| grads.param(name).is_some_and(|g| g.data().iter().all(|&v| v == 0.0)));

    let mut one = SideTune::new(
        &base,
        Some(side_spec),
        Some(InitScheme::Xavier),
        MergeKind::AlphaBlend,
        constant(1.0),
        common,
    )
    .map_err(|e| e.to_string())?;
    let mut fe = SharedBody::features(&base, common).map_err(|e| e.to_string())?;
    let mut readout_bitwise = true;
    for t in &seq.tasks {
        let a = one.train_task(t, &budget).map_err(|e| e.to_string())?;
        let b = fe.train_task(t, &budget).map_err(|e| e.to_string())?;
        readout_bitwise &= a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
        readout_bitwise &= one.head(t.task_id).map(|h| h.params()) == fe.head(t.task_id).map(|h| h.params());
    }
    ensure(
        loss_gap <= 1e-9 && param_gap <= 1e-9 && side_grad_zero && readout_bitwise,
        format!(
            "alpha=0 vs finetune over 100 steps: loss gap {loss_gap:.1e}, param gap {param_gap:.1e}; alpha=1 side grad zero {side_grad_zero}, readout bitwise {readout_bitwise}"
        ),
    )
}

fn c5_hyperbolic() -> Result<String, String> {
    let mut bad = Vec::new();
    for k in [1.0, 10.0, 50.0, 1000.0] {
        let c = AlphaCurriculum::Hyperbolic { k };
        let mut ok = c.value(0) == 1.0 && c.value(k as usize) == 0.5;
        let mut prev = c.value(0);
        for step in 1..20_000 {
            let v = c.value(step);
            ok &= v < prev;
            prev = v;
        }
        ok &= c.value(usize::MAX / 2) < 1e-12;
        if !ok {
            bad.push(k);
        }
    }
    ensure(
        bad.is_empty(),
        format!("alpha(0)=1, alpha(k)=0.5, strictly decreasing, limit 0 for k in {{1,10,50,1000}}; failing {bad:?}"),
    )
}

fn c6_alpha_relevance() -> Result<String, String> {
    let arch = NetworkSpec::mlp(&[8, 32, 4], LayerSpec::Tanh, true, NetworkRole::Base);
    let side = NetworkSpec::mlp(&[8, 4, 4], LayerSpec::Tanh, true, NetworkRole::Side);
    let cfg = StrategyConfig::Sidetune {
        side: Some(side),
        init: Some(InitScheme::LowEnergy),
        merge: MergeKind::AlphaBlend,
        alpha: AlphaParam::Learnable,
    };
    let (mut rel, mut rnd) = (Vec::new(), Vec::new());
    let mut starts_exact = true;
    for seed in SEEDS {
        let (seq, _) = gen_rotated_regression(&RotatedRegressionConfig::new(4), derive_seed(seed, 0, "data"))
            .map_err(|e| e.to_string())?;
        let relevant = pretrain_base(
            &arch,
            Some((&seq.tasks[0], &TrainBudget::new(500, 32, 0.01))),
            seed,
            LossNorm::Mse,
        )
        .map_err(|e| e.to_string())?;
        let random = pretrain_base(&arch, None, seed, LossNorm::Mse).map_err(|e| e.to_string())?;
        for (base, out) in [(&relevant, &mut rel), (&random, &mut rnd)] {
            let mut probe = build_strategy(&cfg, base, Common::new(seed)).map_err(|e| e.to_string())?;
            let start = probe
                .train_task(&seq.tasks[0], &TrainBudget::new(0, 32, 0.01))
                .map_err(|e| e.to_string())?;
            starts_exact &= start.final_alpha == Some(0.5);
            let mut s = build_strategy(&cfg, base, Common::new(seed)).map_err(|e| e.to_string())?;
            let run = sidetune::harness::run_sequence(s.as_mut(), &seq, &TrainBudget::new(300, 32, 0.01))
                .map_err(|e| e.to_string())?;
            let alphas: Vec<f64> = run.final_alphas.ok_or("no alphas")?.iter().map(|a| a.1).collect();
            out.push(median(&alphas));
        }
    }
    let (mr, mx) = (median(&rel), median(&rnd));
    ensure(
        starts_exact && mr > mx,
        format!("median alpha relevant base {mr:.3} vs random base {mx:.3}; both start at 0.5: {starts_exact}"),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_sidetune"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{:?} exited {:?}: {}",
            args,
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).expect("json")).expect("write config");
    path.to_string_lossy().into_owned()
}

fn cli_config(num_tasks: usize, strategies: Value) -> Value {
    json!({
        "schema_version": 1,
        "sequence": {"family": "permuted", "num_tasks": num_tasks},
        "base": {"arch": mlp(16, &[32, 16], "base"),
                 "pretrain": {"budget": {"steps": 200, "batch_size": 32, "lr": 0.01}}},
        "strategies": strategies,
        "budget": {"steps": 150, "batch_size": 32, "lr": 0.01}
    })
}

fn c7_merge_ranks() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let strategies = json!([
        {"name": "product", "strategy": {"kind": "sidetune", "merge": "product"}},
        {"name": "addition", "strategy": {"kind": "sidetune", "merge": "addition"}},
        {"name": "mlp", "strategy": {"kind": "sidetune", "merge": "mlp"}},
        {"name": "film", "strategy": {"kind": "sidetune", "merge": "film"}}
    ]);
    let cfg = write_config(dir.path(), "merges.json", &cli_config(4, strategies));
    let out = dir.path().join("out");
    cli(&[
        "run",
        "--config",
        &cfg,
        "--out",
        &out.to_string_lossy(),
        "--seed",
        "7",
        "--jobs",
        "4",
    ])?;
    let rows = read_rows(&fs::read_to_string(out.join("results.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    cli(&[
        "compare",
        "--config",
        &cfg,
        "--out",
        &out.to_string_lossy(),
        "--seed",
        "7",
        "--jobs",
        "4",
    ])?;
    let mut r = csv::Reader::from_path(out.join("compare.csv")).map_err(|e| e.to_string())?;
    let mut table = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        table.push((
            rec[0].to_string(),
            rec[2].parse::<f64>().map_err(|e| e.to_string())?,
            rec[7].parse::<usize>().map_err(|e| e.to_string())?,
        ));
    }
    let mean = table.iter().map(|t| t.1).sum::<f64>() / table.len() as f64;
    let cells = rows.iter().filter(|r| r.metric_kind == "error_rate").count();
    ensure(
        table.len() == 4
            && table.iter().all(|t| t.2 >= 4 && (1.0..=4.0).contains(&t.1))
            && (mean - 2.5).abs() < 1e-12
            && cells == 4 * 10,
        format!(
            "ranks {}; mean {mean}",
            table
                .iter()
                .map(|t| format!("{}={:.3}", t.0, t.1))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn c8_ablation() -> Result<String, String> {
    let arch = NetworkSpec::mlp(&[8, 32, 4], LayerSpec::Tanh, true, NetworkRole::Base);
    let side = NetworkSpec::mlp(&[8, 4, 4], LayerSpec::Tanh, true, NetworkRole::Side);
    let mut ranks = vec![Vec::new(); 3];
    let mut methods = Vec::new();
    for seed in SEEDS {
        let (seq, _) = gen_rotated_regression(&RotatedRegressionConfig::new(4), derive_seed(seed, 0, "data"))
            .map_err(|e| e.to_string())?;
        let base = pretrain_base(
            &arch,
            Some((&seq.tasks[0], &TrainBudget::new(500, 32, 0.01))),
            seed,
            LossNorm::Mse,
        )
        .map_err(|e| e.to_string())?;
        let rep = ablation_run(
            &base,
            &side,
            Some(InitScheme::LowEnergy),
            &seq,
            &TrainBudget::new(300, 32, 0.01),
            Common::new(seed),
        )
        .map_err(|e| e.to_string())?;
        for (k, r) in rep.avg_ranks.iter().enumerate() {
            ranks[k].push(*r);
        }
        methods = rep.methods;
    }
    let med: Vec<f64> = ranks.iter().map(|r| median(r)).collect();
    let st = methods.iter().position(|m| m == "sidetune").ok_or("sidetune missing")?;
    ensure(
        med.iter().all(|&m| med[st] <= m),
        format!(
            "median ranks {}",
            methods
                .iter()
                .zip(&med)
                .map(|(m, r)| format!("{m}={r:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn c9_boost() -> Result<String, String> {
    let ds = derive_seed(41, 0, "data");
    let gm = GaussianMixtureConfig {
        train_size: 128,
        val_size: 128,
        ..Default::default()
    };
    let seq =
        gen_permuted_tasks(&gaussian_mixture(&gm, ds).map_err(|e| e.to_string())?, 2, ds).map_err(|e| e.to_string())?;
    let arch = NetworkSpec::mlp(&[16, 32, 16], LayerSpec::Tanh, true, NetworkRole::Base);
    let base = pretrain_base(
        &arch,
        Some((&seq.tasks[0], &TrainBudget::new(200, 32, 0.01))),
        41,
        LossNorm::Mse,
    )
    .map_err(|e| e.to_string())?;
    let cfg = BoostConfig {
        side: Some(NetworkSpec::mlp(&[16, 8, 16], LayerSpec::Tanh, true, NetworkRole::Side)),
        init: Some(InitScheme::Xavier),
        ..BoostConfig::new(4)
    };
    let budget = TrainBudget::new(100, 32, 0.01);
    let mut stack = BoostStack::new(&base, cfg.clone(), Common::new(41)).map_err(|e| e.to_string())?;
    let logs = stack.train(&seq.tasks[1], &budget).map_err(|e| e.to_string())?;
    let finals: Vec<f64> = logs.iter().map(|l| l.final_loss).collect();
    let monotone = logs.len() == 4 && finals.windows(2).all(|w| w[1] <= w[0] + 1e-6);
    let cmp = deep_vs_stack(&base, &cfg, &seq.tasks[1], &budget, Common::new(41)).map_err(|e| e.to_string())?;
    let emitted = cmp.deep_train_loss.is_finite() && cmp.stack_train_loss.is_finite();
    ensure(
        monotone && emitted,
        format!(
            "member losses {}; stack ({} params) train {:.4} val {:.4} vs deep ({} params) train {:.4} val {:.4}",
            finals
                .iter()
                .map(|l| format!("{l:.4}"))
                .collect::<Vec<_>>()
                .join(" >= "),
            cmp.stack_params,
            cmp.stack_train_loss,
            cmp.stack_val.loss,
            cmp.deep_params,
            cmp.deep_train_loss,
            cmp.deep_val.loss
        ),
    )
}

fn c10_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let strategies = json!([
        {"name": "sidetune", "strategy": {"kind": "sidetune"}},
        {"name": "ewc", "strategy": {"kind": "ewc", "lambda": 1e5}},
        {"name": "psp", "strategy": {"kind": "psp"}},
        {"name": "pnn", "strategy": {"kind": "pnn_lite"}}
    ]);
    let mut cfg = cli_config(3, strategies);
    cfg["rigidity"] = json!(true);
    let cfg = write_config(dir.path(), "exp.json", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli(&[
        "run",
        "--config",
        &cfg,
        "--out",
        &a.to_string_lossy(),
        "--seed",
        "5",
        "--jobs",
        "1",
    ])?;
    cli(&[
        "run",
        "--config",
        &cfg,
        "--out",
        &b.to_string_lossy(),
        "--seed",
        "5",
        "--jobs",
        "4",
    ])?;
    let mut same = true;
    let mut bytes = 0;
    for name in ["results.csv", "rigidity.csv"] {
        let (x, y) = (
            fs::read(a.join(name)).map_err(|e| e.to_string())?,
            fs::read(b.join(name)).map_err(|e| e.to_string())?,
        );
        same &= x == y;
        bytes += x.len();
    }
    ensure(
        same,
        format!("two runs with seed 5 (1 and 4 jobs): {bytes} bytes of CSV, identical {same}"),
    )
}

fn main() {
    let checks: [(usize, &str, Check); 10] = [
        (1, "gradient suite", c1_gradients),
        (2, "zero forgetting", c2_zero_forgetting),
        (3, "rigidity", c3_rigidity),
        (4, "alpha reductions", c4_reductions),
        (5, "hyperbolic curriculum", c5_hyperbolic),
        (6, "alpha tracks base relevance", c6_alpha_relevance),
        (7, "merge rank table", c7_merge_ranks),
        (8, "base/side ablation", c8_ablation),
        (9, "boosting", c9_boost),
        (10, "run determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
