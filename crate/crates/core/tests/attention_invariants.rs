mod common;

use proptest::prelude::*;
use relext_autograd::{softmax, Graph, Tensor};
use relext_core::attention::{bag_attention, forward_bag, infer_bag};
use relext_core::ivat::instance_distribution;
use relext_core::trainer::attention_histogram;

use common::{fixture, tiny_config};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn weights_are_a_distribution(seed in any::<u64>(), size in 1usize..7) {
        let fx = fixture(seed, &[size], tiny_config());
        for r in 0..fx.cfg.n_relations {
            let a = bag_attention(&fx.params, &fx.cfg, &fx.bags[0], r).unwrap();
            prop_assert_eq!(a.len(), size);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|v| *v >= 0.0));
            if size == 1 {
                prop_assert_eq!(a[0], 1.0);
            }
        }
    }

    #[test]
    fn softmax_shift_invariance(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let a = softmax(&Tensor::vector(v.clone()));
        let b = softmax(&Tensor::vector(v.iter().map(|x| x + c).collect()));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn singleton_bags_match_instance_prediction() {
    for seed in 0..20 {
        let fx = fixture(seed, &[1], tiny_config());
        let f = &fx.bags[0][0];
        let scores = infer_bag(&fx.params, &fx.cfg, &fx.bags[0]).unwrap();
        let dist = instance_distribution(&fx.params, &fx.cfg, f).unwrap();
        for (r, s) in scores.iter().enumerate() {
            assert_eq!(*s, dist[r]);
        }
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn duplicate_instances_split_evenly_and_fill_the_middle_bin() {
    let fx = fixture(8, &[1], tiny_config());
    let bag = vec![fx.bags[0][0].clone(), fx.bags[0][0].clone()];
    let mut g = Graph::new();
    let p = fx.params.bind_frozen(&mut g);
    let fwd = forward_bag(&mut g, &p, &fx.cfg, &bag, 1).unwrap();
    let a = fwd.alphas(&g);
    assert_eq!(a, vec![0.5, 0.5]);
    let h = attention_histogram(&[a]);
    assert_eq!(h.bins[5], 2);
    let singles = attention_histogram(&[vec![1.0], vec![1.0], vec![1.0]]);
    assert_eq!(singles.singleton, 3);
    assert_eq!(singles.bins.iter().sum::<u64>(), 0);
}
