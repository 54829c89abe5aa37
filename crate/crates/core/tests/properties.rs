//! Structural invariants of the samplers through the public API.

use fvlab_core::coalescent::{sample_kingman, CoalescentTree};
use fvlab_core::genealogy::{backward_moran_sample, coupled_pair_sample, sample_invariant_with_tree, sigma_from_times};
use fvlab_core::moran::{centered_path, simulate, InitialCondition, MoranConfig, RatePreset};
use fvlab_core::seed::replica_rng;
use fvlab_core::EmpiricalMeasure;
use nalgebra::SymmetricEigen;
use proptest::prelude::*;

fn preset() -> impl Strategy<Value = RatePreset> {
    prop_oneof![Just(RatePreset::Genealogical), Just(RatePreset::Diffusion), (0.1..3.0f64).prop_map(RatePreset::Custom)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn moran_paths_keep_shape(
        atoms in prop::collection::vec(-3.0..3.0f64, 2..12),
        gamma in 0.0..3.0f64,
        preset in preset(),
        seed in any::<u64>(),
    ) {
        let n = atoms.len();
        let cfg = MoranConfig::new(n, gamma, preset, 0.5, 0.1, InitialCondition::Atoms(atoms.clone()));
        let path = simulate(&cfg, &mut replica_rng(seed, 0)).unwrap();
        prop_assert_eq!(path.snapshots.len(), cfg.snapshot_times.len());
        prop_assert_eq!(&path.snapshots[0].1.atoms()[..], &atoms[..]);
        for ((t, m), s) in path.snapshots.iter().zip(&cfg.snapshot_times) {
            prop_assert_eq!(t, s);
            prop_assert_eq!(m.len(), n);
        }
        for (_, z) in &centered_path(&path) {
            let scale = 1.0 + z.atoms().iter().fold(0.0f64, |a, x| a.max(x.abs()));
            prop_assert!(z.as_measure().mean().abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn moran_commutes_with_shifts(
        atoms in prop::collection::vec(-3.0..3.0f64, 2..8),
        shift in -5.0..5.0f64,
        seed in any::<u64>(),
    ) {
        let shifted: Vec<f64> = atoms.iter().map(|x| x + shift).collect();
        let run = |a: Vec<f64>| {
            let cfg = MoranConfig::new(a.len(), 1.0, RatePreset::Diffusion, 1.0, 0.25, InitialCondition::Atoms(a));
            simulate(&cfg, &mut replica_rng(seed, 1)).unwrap()
        };
        let (p, q) = (run(atoms), run(shifted));
        prop_assert_eq!(p.event_count, q.event_count);
        for ((_, a), (_, b)) in p.snapshots.iter().zip(&q.snapshots) {
            for (x, y) in a.atoms().iter().zip(b.atoms()) {
                prop_assert!((x + shift - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn backward_sample_bookkeeping(
        atoms in prop::collection::vec(-3.0..3.0f64, 2..12),
        horizon in 0.0..4.0f64,
        rate in 0.1..3.0f64,
        seed in any::<u64>(),
    ) {
        let n = atoms.len();
        let mu0 = EmpiricalMeasure::new(atoms).unwrap();
        let s = backward_moran_sample(&mu0, horizon, rate, &mut replica_rng(seed, 2)).unwrap();
        prop_assert_eq!(s.leaf_values.len(), n);
        prop_assert!(s.lineages >= 1 && s.lineages <= n);
        prop_assert_eq!(s.lineages, s.tree.lineages_at(horizon));
        prop_assert_eq!(s.coalesced(), s.tree.height() <= horizon);
    }

    #[test]
    fn coupled_outputs_agree_after_coalescence(
        n in 2usize..10,
        horizon in 0.0..6.0f64,
        seed in any::<u64>(),
    ) {
        let mu0 = EmpiricalMeasure::new((0..n).map(|i| i as f64).collect()).unwrap();
        let nu0 = EmpiricalMeasure::new((0..n).map(|i| -(i as f64).powi(2)).collect()).unwrap();
        let pair = coupled_pair_sample(&mu0, &nu0, horizon, 1.0, &mut replica_rng(seed, 3)).unwrap();
        if pair.coalesced {
            prop_assert_eq!(pair.first.atoms(), pair.second.atoms());
        }
    }

    #[test]
    fn sigma_is_a_centered_covariance(n in 2usize..12, seed in any::<u64>()) {
        let tree = sample_kingman(n, 1.0, &mut replica_rng(seed, 4)).unwrap();
        let sigma = sigma_from_times(&tree.pairwise_times()).unwrap();
        let scale = 1.0 + tree.height();
        for i in 0..n {
            prop_assert!(sigma.row(i).sum().abs() <= 1e-12 * scale * n as f64);
        }
        let eig = SymmetricEigen::new(sigma.clone());
        prop_assert!(eig.eigenvalues.min() >= -1e-10 * scale);
    }

    #[test]
    fn trees_round_trip_through_json(n in 2usize..15, seed in any::<u64>()) {
        let tree = sample_kingman(n, 0.7, &mut replica_rng(seed, 5)).unwrap();
        let back = CoalescentTree::from_json(&tree.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn measures_round_trip_through_csv(atoms in prop::collection::vec(-1e6..1e6f64, 1..40)) {
        let m = EmpiricalMeasure::new(atoms).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        prop_assert!(buf.starts_with(b"position\n"));
        prop_assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), m);
    }
}

#[test]
fn invariant_draw_matches_its_tree() {
    let (tree, v) = sample_invariant_with_tree(8, 1.0, &mut replica_rng(11, 0)).unwrap();
    assert_eq!(tree.leaf_count(), 8);
    assert_eq!(v.atoms().len(), 8);
    assert!(v.atoms().iter().sum::<f64>().abs() < 1e-12);
}
