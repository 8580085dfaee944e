use std::collections::HashMap;

use ocs_core::analytic::Depth;
use ocs_core::linalg::alignment;
use ocs_core::network::{init_network, BiasPlacement, InitMode, NetworkConfig};
use ocs_core::response::{discretize, subset_distribution, DiscretizationConfig};
use ocs_core::spectral::{commutator_check, correlation_matrices, ocs_vector, task_svd};
use ocs_core::task_data::{
    augment_bias, build_hierarchy, load_dataset, save_dataset, Dataset, HierarchySpec,
};
use ocs_core::trainer::{train, TrainConfig};
use ocs_core::Vector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rooted() -> Dataset {
    build_hierarchy(&HierarchySpec::default()).unwrap()
}

fn net_config(d: &Dataset, bias: BiasPlacement, init: InitMode, scale: f64) -> NetworkConfig {
    NetworkConfig {
        depth: Depth::Deep,
        n_in: d.n_in(),
        n_hid: 16,
        n_out: d.n_out(),
        bias,
        init,
        init_scale: scale,
        seed: 9,
    }
}

#[test]
fn sampled_responses_match_enumerated_distribution() {
    let d = rooted();
    let ybar = ocs_vector(&d);
    let target = d.y.column(2).into_owned();
    let y_hat: Vector = &ybar + (&target - &ybar) * 0.4;
    let cfg = DiscretizationConfig::default();
    let exact = subset_distribution(&y_hat, &cfg).unwrap();

    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        let r = discretize(&y_hat, &cfg, &mut rng).unwrap();
        let set: Vec<usize> = (0..r.len()).filter(|&i| r[i] == 1.0).collect();
        *counts.entry(set).or_default() += 1;
    }
    let tv: f64 = 0.5
        * exact
            .iter()
            .map(|(s, p)| (p - *counts.get(s).unwrap_or(&0) as f64 / draws as f64).abs())
            .sum::<f64>();
    assert!(tv <= 0.01, "total variation {tv}");
}

#[test]
fn explicit_bias_trains_like_augmented_inputs() {
    let d = rooted();
    let aug = augment_bias(&d).unwrap();
    let explicit = init_network(
        &net_config(&d, BiasPlacement::Input, InitMode::RandomSmall, 0.1),
        None,
    )
    .unwrap();
    let mut folded = explicit.fold_input_bias(1.0).unwrap();
    let mut explicit = explicit;
    let cfg = TrainConfig::from_tau(50.0, d.samples(), 2000, 100);
    let a = train(&mut explicit, &d, &cfg, None).unwrap();
    let b = train(&mut folded, &aug, &cfg, None).unwrap();
    for (ya, yb) in a.outputs.iter().zip(&b.outputs) {
        assert!((ya - yb).amax() < 1e-10);
    }
    for (la, lb) in a.loss.iter().zip(&b.loss) {
        assert!((la - lb).abs() <= 1e-12 * la.max(1.0));
    }
}

#[test]
fn gradient_descent_reaches_near_zero_loss() {
    let d = rooted();
    let dec = task_svd(&correlation_matrices(&d)).unwrap();
    let mut net = init_network(
        &net_config(&d, BiasPlacement::None, InitMode::Spectral, 1e-4),
        Some(&dec),
    )
    .unwrap();
    let tau = 1000.0;
    let cfg = TrainConfig {
        learning_rate: 1e-3 / d.samples() as f64,
        steps: 200 * tau as usize,
        log_stride: 10_000,
        record_outputs: false,
    };
    let s = train(&mut net, &d, &cfg, None).unwrap();
    let (first, last) = (s.loss[0], *s.loss.last().unwrap());
    assert!(last <= 1e-6 * first, "{first} -> {last}");
}

#[test]
fn runs_are_bit_identical_for_a_seed() {
    let d = rooted();
    let run = || {
        let mut net = init_network(
            &net_config(&d, BiasPlacement::Both, InitMode::RandomSmall, 0.01),
            None,
        )
        .unwrap();
        let s = train(
            &mut net,
            &d,
            &TrainConfig::from_tau(100.0, d.samples(), 500, 50),
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        (buf, net.parameters())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hierarchies_commute_and_lead_with_the_ocs(
        depth in 1usize..4,
        branching in 2usize..4,
        include_root in any::<bool>(),
    ) {
        let d = build_hierarchy(&HierarchySpec { depth, branching, include_root }).unwrap();
        let aug = augment_bias(&d).unwrap();
        prop_assert!(commutator_check(&d, 1e-12).residual <= 1e-12);
        prop_assert!(commutator_check(&aug, 1e-12).residual <= 1e-12);
        let dec = task_svd(&correlation_matrices(&aug)).unwrap();
        prop_assert!(alignment(&dec.u_col(0), &ocs_vector(&aug)) >= 1.0 - 1e-8);
        prop_assert_eq!(dec.ocs_index, Some(0));
    }

    #[test]
    fn saved_datasets_load_back_exactly(
        depth in 1usize..4,
        branching in 2usize..4,
        include_root in any::<bool>(),
        augmented in any::<bool>(),
    ) {
        let mut d = build_hierarchy(&HierarchySpec { depth, branching, include_root }).unwrap();
        if augmented {
            d = augment_bias(&d).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path, None).unwrap();
        prop_assert_eq!(&back.x, &d.x);
        prop_assert_eq!(&back.y, &d.y);
        prop_assert_eq!(&back.level_slices, &d.level_slices);
        prop_assert_eq!(back.bias_augmented, d.bias_augmented);
    }
}
