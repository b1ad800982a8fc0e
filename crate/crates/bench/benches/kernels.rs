use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sidetune::harness::pretrain_base;
use sidetune::nets::InitScheme;
use sidetune::strategies::{Common, LossNorm, SideTune, Strategy, TrainBudget};
use sidetune::{build_network, AlphaParam, LayerSpec, MergeKind, NetworkRole, NetworkSpec, Rng, Tape};
use sidetune_bench::{conv_spec, normal, permuted};

fn tape_matmul(c: &mut Criterion) {
    let a = normal(&[64, 128], 1);
    let b = normal(&[128, 64], 2);
    c.bench_function("tape/matmul_64x128x64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(a.clone()).unwrap();
            let w = tape.param("w", &b).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y).unwrap();
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn conv_net(c: &mut Criterion) {
    let net = build_network(&conv_spec(), "conv", &mut Rng::new(3)).unwrap();
    let x = normal(&[16, 3, 16, 16], 4);
    c.bench_function("nets/conv_batch16_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let out = net.forward(&mut tape, xv).unwrap();
            let s = tape.sum(out).unwrap();
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn sidetune_steps(c: &mut Criterion) {
    let seq = permuted(1, 5);
    let arch = NetworkSpec::mlp(&[16, 32, 16], LayerSpec::Tanh, true, NetworkRole::Base);
    let base = pretrain_base(&arch, None, 5, LossNorm::Mse).unwrap();
    let side = NetworkSpec::mlp(&[16, 8, 16], LayerSpec::Tanh, true, NetworkRole::Side);
    let budget = TrainBudget::new(50, 32, 0.01);
    c.bench_function("strategies/sidetune_50_steps", |bench| {
        bench.iter(|| {
            let mut st = SideTune::new(
                &base,
                Some(side.clone()),
                Some(InitScheme::Xavier),
                MergeKind::AlphaBlend,
                AlphaParam::Learnable,
                Common::new(5),
            )
            .unwrap();
            black_box(st.train_task(&seq.tasks[0], &budget).unwrap());
        })
    });
}

criterion_group!(benches, tape_matmul, conv_net, sidetune_steps);
criterion_main!(benches);
