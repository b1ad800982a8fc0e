mod common;

use common::{budget, permuted, pretrained_base, side_spec};
use sidetune::harness::{compute_forgetting, run_sequence};
use sidetune::nets::InitScheme;
use sidetune::strategies::{
    build_strategy, count_params, report_alpha, restore_checkpoint, strategy_checkpoint, Common, ParamGroup,
    SharedBody, Strategy, StrategyConfig, StrategyKind,
};
use sidetune::tasks::Split;
use sidetune::{AlphaCurriculum, AlphaParam, Error, MergeKind};

fn all_configs() -> Vec<StrategyConfig> {
    vec![
        StrategyConfig::sidetune(MergeKind::AlphaBlend, AlphaParam::Learnable),
        StrategyConfig::Finetune,
        StrategyConfig::Features,
        StrategyConfig::Scratch { arch: None },
        StrategyConfig::Ewc {
            lambda: 1e5,
            gamma: 1.0,
            fisher_samples: 64,
        },
        StrategyConfig::Psp,
        StrategyConfig::PnnLite {
            side: None,
            init: None,
            merge: MergeKind::AlphaBlend,
            alpha: AlphaParam::Learnable,
        },
        StrategyConfig::Independent,
    ]
}

#[test]
fn training_never_ends_above_the_initial_loss() {
    let seq = permuted(2, 5);
    let base = pretrained_base(&seq, 5);
    for cfg in all_configs() {
        let mut s = build_strategy(&cfg, &base, Common::new(5)).unwrap();
        for task in &seq.tasks {
            let log = s.train_task(task, &budget(150)).unwrap();
            assert!(
                log.final_loss <= log.initial_loss,
                "{:?} task {}: {} > {}",
                cfg.kind(),
                task.task_id,
                log.final_loss,
                log.initial_loss
            );
        }
    }
}

#[test]
fn additive_strategies_never_touch_the_base() {
    let seq = permuted(3, 6);
    let base = pretrained_base(&seq, 6);
    for cfg in all_configs() {
        let mut s = build_strategy(&cfg, &base, Common::new(6)).unwrap();
        let run = run_sequence(s.as_mut(), &seq, &budget(60)).unwrap();
        let unchanged = run.base_checksums.windows(2).all(|w| w[0] == w[1]);
        if cfg.kind().is_additive() {
            assert!(unchanged, "{:?} changed the base", cfg.kind());
        }
        if matches!(cfg.kind(), StrategyKind::Finetune | StrategyKind::Ewc) {
            assert!(!unchanged, "{:?} should train the base", cfg.kind());
        }
    }
}

#[test]
fn zero_forgetting_is_exact_for_isolating_strategies() {
    let seq = permuted(3, 7);
    let base = pretrained_base(&seq, 7);
    for cfg in all_configs() {
        let kind = cfg.kind();
        if !matches!(
            kind,
            StrategyKind::Sidetune
                | StrategyKind::PnnLite
                | StrategyKind::Independent
                | StrategyKind::Features
                | StrategyKind::Scratch
        ) {
            continue;
        }
        let mut s = build_strategy(&cfg, &base, Common::new(7)).unwrap();
        let run = run_sequence(s.as_mut(), &seq, &budget(80)).unwrap();
        for j in 0..seq.len() {
            for i in j..seq.len() {
                let a = run.grid.get(i, j).unwrap();
                let b = run.grid.get(j, j).unwrap();
                assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "{kind:?} E[{i}][{j}]");
            }
        }
        assert!(compute_forgetting(&run.grid).iter().all(|&f| f == 0.0));
    }
}

#[test]
fn finetuning_forgets() {
    let seq = permuted(3, 8);
    let base = pretrained_base(&seq, 8);
    let mut s = build_strategy(&StrategyConfig::Finetune, &base, Common::new(8)).unwrap();
    let run = run_sequence(s.as_mut(), &seq, &budget(200)).unwrap();
    assert!(compute_forgetting(&run.grid)[0] > 0.0);
}

#[test]
fn sidetune_is_task_order_independent() {
    let seq = permuted(3, 9);
    let base = pretrained_base(&seq, 9);
    let cfg = StrategyConfig::sidetune(MergeKind::AlphaBlend, AlphaParam::Learnable);
    let mut fwd = build_strategy(&cfg, &base, Common::new(9)).unwrap();
    let mut rev = build_strategy(&cfg, &base, Common::new(9)).unwrap();
    for t in &seq.tasks {
        fwd.train_task(t, &budget(50)).unwrap();
    }
    for t in seq.tasks.iter().rev() {
        rev.train_task(t, &budget(50)).unwrap();
    }
    for t in &seq.tasks {
        let a = fwd.evaluate(t, Split::Val, false).unwrap();
        let b = rev.evaluate(t, Split::Val, false).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(strategy_checkpoint(fwd.as_ref()), strategy_checkpoint(rev.as_ref()));
}

#[test]
fn random_readout_is_at_chance_on_ten_balanced_classes() {
    use sidetune::tasks::{gaussian_mixture, gen_permuted_tasks, GaussianMixtureConfig};
    let cfg = GaussianMixtureConfig {
        num_classes: 10,
        train_size: 200,
        val_size: 4000,
        ..Default::default()
    };
    let seq = gen_permuted_tasks(&gaussian_mixture(&cfg, 1).unwrap(), 1, 1).unwrap();
    let base = sidetune::build_network(&common::base_spec(), "base", &mut sidetune::Rng::new(1)).unwrap();
    let s = SharedBody::features(&base, Common::new(1)).unwrap();
    let err = s.evaluate(&seq.tasks[0], Split::Val, true).unwrap().error_rate.unwrap();
    assert!((err - 0.9).abs() <= 0.05, "error {err}");
}

#[test]
fn evaluating_an_unseen_task_needs_zero_shot() {
    let seq = permuted(2, 10);
    let base = pretrained_base(&seq, 10);
    for cfg in all_configs() {
        let s = build_strategy(&cfg, &base, Common::new(10)).unwrap();
        assert!(matches!(
            s.evaluate(&seq.tasks[1], Split::Val, false),
            Err(Error::Contract(_))
        ));
        assert!(s.evaluate(&seq.tasks[1], Split::Val, true).is_ok());
    }
}

/// Walks every stored tensor and adds up its elements by group.
fn enumerate(s: &dyn Strategy, group: ParamGroup) -> usize {
    s.groups()
        .into_iter()
        .filter(|(g, _)| *g == group)
        .flat_map(|(_, store)| store.iter().map(|(_, p)| p.value.data().len()).collect::<Vec<_>>())
        .sum()
}

#[test]
fn sidetune_trainable_count_matches_enumeration() {
    let seq = permuted(3, 11);
    let base = pretrained_base(&seq, 11);
    let cfg = StrategyConfig::Sidetune {
        side: Some(side_spec()),
        init: Some(InitScheme::Xavier),
        merge: MergeKind::AlphaBlend,
        alpha: AlphaParam::Learnable,
    };
    let mut s = build_strategy(&cfg, &base, Common::new(11)).unwrap();
    // Side 16→8→16 and readout 16→4, with biases.
    let side = 16 * 8 + 8 + 8 * 16 + 16;
    let readout = 16 * 4 + 4;
    for (k, t) in seq.tasks.iter().enumerate() {
        s.train_task(t, &budget(5)).unwrap();
        let k = k + 1;
        let expected = k * side + k * readout + k;
        assert_eq!(count_params(s.as_ref(), true, true), expected);
        let walked = enumerate(s.as_ref(), ParamGroup::Side)
            + enumerate(s.as_ref(), ParamGroup::Readout)
            + enumerate(s.as_ref(), ParamGroup::Merge);
        assert_eq!(walked, expected);
        assert_eq!(
            count_params(s.as_ref(), false, true),
            expected + enumerate(s.as_ref(), ParamGroup::Base)
        );
        assert_eq!(count_params(s.as_ref(), true, false), k * side + k);
    }
}

#[test]
fn report_alpha_needs_an_alpha_merge() {
    let seq = permuted(1, 12);
    let base = pretrained_base(&seq, 12);
    let mut s = build_strategy(
        &StrategyConfig::sidetune(MergeKind::Product, AlphaParam::Learnable),
        &base,
        Common::new(12),
    )
    .unwrap();
    s.train_task(&seq.tasks[0], &budget(5)).unwrap();
    assert!(matches!(report_alpha(s.as_ref(), 0), Err(Error::Contract(_))));
    let sched = AlphaParam::Scheduled(AlphaCurriculum::Hyperbolic { k: 10.0 });
    let mut s = build_strategy(
        &StrategyConfig::sidetune(MergeKind::AlphaBlend, sched),
        &base,
        Common::new(12),
    )
    .unwrap();
    s.train_task(&seq.tasks[0], &budget(10)).unwrap();
    assert_eq!(report_alpha(s.as_ref(), 0).unwrap(), 0.5);
}

#[test]
fn checkpoints_restore_every_parameter() {
    let seq = permuted(2, 13);
    let base = pretrained_base(&seq, 13);
    for cfg in all_configs() {
        let mut a = build_strategy(&cfg, &base, Common::new(13)).unwrap();
        let mut b = build_strategy(&cfg, &base, Common::new(14)).unwrap();
        for t in &seq.tasks {
            a.train_task(t, &budget(20)).unwrap();
            b.train_task(t, &budget(20)).unwrap();
        }
        let ckpt = strategy_checkpoint(a.as_ref());
        let mut bytes = Vec::new();
        sidetune::nets::write_checkpoint(&mut bytes, &ckpt).unwrap();
        let read = sidetune::nets::read_checkpoint(&mut bytes.as_slice()).unwrap();
        restore_checkpoint(b.as_mut(), &read).unwrap();
        if cfg.kind() != StrategyKind::Psp {
            for t in &seq.tasks {
                let ma = a.evaluate(t, Split::Val, false).unwrap();
                let mb = b.evaluate(t, Split::Val, false).unwrap();
                assert_eq!(ma.loss.to_bits(), mb.loss.to_bits(), "{:?}", cfg.kind());
            }
        }
        assert_eq!(strategy_checkpoint(b.as_ref()), ckpt);
    }
}

#[test]
fn ewc_consolidation_before_training_is_a_contract_error() {
    let seq = permuted(1, 15);
    let base = pretrained_base(&seq, 15);
    let mut s = SharedBody::ewc(&base, 1.0, 1.0, 16, Common::new(15)).unwrap();
    assert!(matches!(s.consolidate(&seq.tasks[0]), Err(Error::Contract(_))));
    s.train_task(&seq.tasks[0], &budget(10)).unwrap();
    assert_eq!(s.ewc_state().unwrap().consolidations(), 1);
    let mut f = SharedBody::finetune(&base, Common::new(15)).unwrap();
    f.train_task(&seq.tasks[0], &budget(10)).unwrap();
    assert!(matches!(f.consolidate(&seq.tasks[0]), Err(Error::Contract(_))));
}
