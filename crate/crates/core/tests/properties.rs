use proptest::prelude::*;
use sidetune::merge::alpha_value;
use sidetune::nets::{read_checkpoint, write_checkpoint, Checkpoint};
use sidetune::{AlphaCurriculum, AlphaParam, Tensor};

fn tensor() -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(1usize..4, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        proptest::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
            .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        entries in proptest::collection::vec(("[a-z.0-9]{1,12}", tensor()), 0..5),
        strategy in proptest::option::of(("[a-z_]{1,10}", 0usize..50)),
    ) {
        let ckpt = Checkpoint { strategy, entries };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.strategy, ckpt.strategy);
        prop_assert_eq!(back.entries.len(), ckpt.entries.len());
        for ((n1, t1), (n2, t2)) in back.entries.iter().zip(&ckpt.entries) {
            prop_assert_eq!(n1, n2);
            prop_assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn alpha_stays_in_unit_interval(logit in -1e6f64..1e6, step in 0usize..1_000_000, k in 1e-3f64..1e6, c in 0.0f64..=1.0, t in 0usize..1000) {
        let params = [
            AlphaParam::Learnable,
            AlphaParam::Scheduled(AlphaCurriculum::Constant { value: c }),
            AlphaParam::Scheduled(AlphaCurriculum::StageSwitch { switch_step: t }),
            AlphaParam::Scheduled(AlphaCurriculum::Hyperbolic { k }),
        ];
        for p in params {
            let a = alpha_value(&p, logit, step);
            prop_assert!((0.0..=1.0).contains(&a), "{p:?} gave {a}");
        }
    }
}
