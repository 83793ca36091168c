//! Property tests over randomly generated models and short runs.

use mlemtrl::analysis::{realisability_gap, weissman_cell_bound, TabularRegret};
use mlemtrl::envs::{random_lqr_model, TabularEnv};
use mlemtrl::likelihood::{log_lik_tabular, CountTable};
use mlemtrl::planning::{plan_lqr, policy_evaluation, value_iteration, PlannerOptions, TabularPolicy};
use mlemtrl::seeding::RunStreams;
use mlemtrl::transfer::{run_meta_mlemtrl, run_mlemtrl, MetaConfig, TabularDomain, TransferConfig};
use mlemtrl::{mix_tabular, MixtureWeights, SourceSet, TabularMdp};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex_point(raw: &[f64]) -> MixtureWeights {
    let total: f64 = raw.iter().sum();
    MixtureWeights::new(raw.iter().map(|x| x / total).collect()).unwrap()
}

fn random_mdp(ns: usize, na: usize, rng: &mut ChaCha8Rng, rewards: &[f64]) -> TabularMdp {
    TabularMdp::from_fn(
        ns,
        na,
        0.9,
        |_, _| {
            let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect()
        },
        |s, a| rewards[s * na + a],
    )
    .unwrap()
}

fn random_sources(ns: usize, na: usize, m: usize, seed: u64) -> SourceSet<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards: Vec<f64> = (0..ns * na).map(|_| rng.random()).collect();
    SourceSet::new((0..m).map(|_| random_mdp(ns, na, &mut rng, &rewards)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hull_interior_targets_have_zero_gap(
        seed in 0u64..10_000,
        raw in proptest::collection::vec(0.05f64..1.0, 3),
    ) {
        let sources = random_sources(4, 2, 3, seed);
        let target = mix_tabular(&sources, &simplex_point(&raw)).unwrap();
        let (gap, w) = realisability_gap(&sources, &target).unwrap();
        prop_assert!(gap < 1e-6, "gap {gap}");
        let rebuilt = mix_tabular(&sources, &w).unwrap();
        let err: f64 = rebuilt.transitions().iter().zip(target.transitions()).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn likelihood_depends_only_on_counts(
        seed in 0u64..10_000,
        mut records in proptest::collection::vec((0usize..3, 0usize..2, 0usize..3), 1..60),
    ) {
        let model = random_sources(3, 2, 1, seed).models()[0].clone();
        let tally = |recs: &[(usize, usize, usize)]| {
            let mut c = CountTable::new(3, 2);
            for &(s, a, n) in recs {
                c.record(s, a, n).unwrap();
            }
            log_lik_tabular(&c, &model).unwrap()
        };
        let forward = tally(&records);
        records.reverse();
        prop_assert_eq!(forward, tally(&records));
    }

    #[test]
    fn optimal_policy_beats_every_single_deviation(seed in 0u64..10_000, ns in 2usize..6, na in 1usize..4) {
        let model = random_sources(ns, na, 1, seed).models()[0].clone();
        let (_, policy) = value_iteration(&model, 1e-12);
        let base = policy_evaluation(&model, &policy).unwrap();
        for s in 0..ns {
            for a in 0..na {
                let mut actions = policy.actions.clone();
                actions[s] = a;
                let v = policy_evaluation(&model, &TabularPolicy { actions }).unwrap();
                for k in 0..ns {
                    prop_assert!(v.values[k] <= base.values[k] + 1e-8);
                }
            }
        }
    }

    #[test]
    fn dare_solution_is_symmetric_psd(seed in 0u64..100_000, ds in 1usize..7, da in 1usize..3) {
        let model = random_lqr_model(ds, da, seed, 0.01).unwrap();
        let gain = plan_lqr(&model, &PlannerOptions::default()).unwrap();
        prop_assert!((&gain.p - gain.p.transpose()).amax() < 1e-10);
        let eig = gain.p.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn concentration_bound_shrinks_with_data(n in 1u64..10_000, ns in 2usize..20) {
        let a = weissman_cell_bound(ns, n, 0.05).unwrap();
        let b = weissman_cell_bound(ns, n + 1, 0.05).unwrap();
        let looser = weissman_cell_bound(ns, n, 0.01).unwrap();
        prop_assert!(b < a && a < looser);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_keep_weights_feasible_and_regret_nonnegative(
        seed in 0u64..10_000,
        raw in proptest::collection::vec(0.05f64..1.0, 3),
        meta in any::<bool>(),
    ) {
        let sources = random_sources(4, 2, 3, seed);
        let target = mix_tabular(&sources, &simplex_point(&raw)).unwrap();
        let oracle = TabularRegret::new(&target).unwrap();
        let mut domain = TabularDomain::new(TabularEnv::new(target), sources, &TransferConfig::default()).unwrap();
        let mut streams = RunStreams::from_seed(seed);
        let log = if meta {
            run_meta_mlemtrl(&mut domain, 150, MetaConfig::new(0.5).unwrap(), &mut streams).unwrap()
        } else {
            run_mlemtrl(&mut domain, 150, &mut streams).unwrap()
        };
        prop_assert_eq!(log.records.len(), 150);
        let mut cum = 0.0;
        for r in &log.records {
            prop_assert!((r.w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(r.w.iter().all(|&x| x >= -1e-12));
            prop_assert!(r.regret >= 0.0);
            cum += r.reward;
            prop_assert!((r.cum_reward - cum).abs() < 1e-9);
        }
        prop_assert!(oracle.optimal_values().values.iter().all(|v| v.is_finite()));
    }
}
