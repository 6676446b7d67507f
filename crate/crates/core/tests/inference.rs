use crfkit::features::SparseFeatureVector;
use crfkit::graph::{build_grid_graph, FactorGraph, GraphPotentials};
use crfkit::inference::*;
use crfkit::objectives::{bethe_surrogate, general_cll, GraphInference, RegularizerSpec};
use crfkit::oracle::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_exact(g: &FactorGraph, pot: &GraphPotentials, b: &BeliefState, e: &GraphEnumeration) {
    assert!(max_diff(&b.node, &e.node) < 1e-8);
    assert!(max_diff(&b.factor, &e.factor) < 1e-8);
    assert!((b.log_z - e.log_z).abs() < 1e-8);
    let energy = bethe_free_energy(g, b, pot).unwrap();
    assert!((-energy - e.log_z).abs() < 1e-8);
}

#[test]
fn tree_beliefs_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let g = random_tree(&mut rng, n, 3, 3);
        let pot = random_potentials(&mut rng, &g, 2.0);
        let e = enumerate_graph(&g, &pot);
        check_exact(&g, &pot, &tree_bp(&g, &pot).unwrap(), &e);
        let config = BpConfig { max_iters: 200, tolerance: 1e-12, damping: 0.0 };
        let loopy = loopy_bp(&g, &pot, config).unwrap();
        assert!(loopy.converged);
        check_exact(&g, &pot, &loopy, &e);
    }
}

#[test]
fn tree_joint_factorizes_through_beliefs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let g = random_tree(&mut rng, 6, 3, 3);
        let pot = random_potentials(&mut rng, &g, 1.5);
        let b = tree_bp(&g, &pot).unwrap();
        let e = enumerate_graph(&g, &pot);
        let y = random_assignment(&mut rng, &g);
        let lp = log_joint_from_marginals(&g, &b, &y).unwrap();
        assert!((lp - e.joint(&y).ln()).abs() < 1e-8);
        let s = bethe_surrogate(&g, &pot, &y, &b).unwrap();
        assert!((s.primal - lp).abs() < 1e-8);
        assert!((s.dual - lp).abs() < 1e-8);
    }
}

#[test]
fn loopy_on_trees_matches_exact_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let data = random_tree_dataset(&mut rng, 4, 6, 3, 6);
    let w = random_weights(&mut rng, 6, 1.0);
    let a = general_cll(&w, &data, RegularizerSpec::None, GraphInference::ExactTree).unwrap();
    let config = BpConfig { max_iters: 200, tolerance: 1e-12, damping: 0.0 };
    let b = general_cll(&w, &data, RegularizerSpec::None, GraphInference::LoopyBp(config)).unwrap();
    assert!((a.value - b.value).abs() < 1e-8);
    assert!(b.converged);
}

fn small_grid(rng: &mut ChaCha8Rng, coupling: f64) -> (FactorGraph, GraphPotentials) {
    let pairwise = (0..4)
        .map(|i| SparseFeatureVector::from_entries([(0, if i == 0 || i == 3 { 1.0 } else { -1.0 })]))
        .collect();
    let unary = (0..9)
        .map(|_| (0..2).map(|_| SparseFeatureVector::from_entries([(1, rng.random_range(-1.0..=1.0))])).collect())
        .collect();
    let g = build_grid_graph(3, 3, 2, pairwise, Some(unary), 2).unwrap();
    let pot = g.log_potentials(&[coupling, 1.0]).unwrap();
    (g, pot)
}

#[test]
fn loopy_bp_is_locally_consistent_and_close_on_weak_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (g, pot) = small_grid(&mut rng, 0.2);
    assert!(!g.is_tree());
    assert!(tree_bp(&g, &pot).is_err());
    let b = loopy_bp(&g, &pot, BpConfig { max_iters: 500, tolerance: 1e-10, damping: 0.0 }).unwrap();
    assert!(b.converged);
    for f in g.factors() {
        for (slot, &v) in f.scope.iter().enumerate() {
            let cards = g.scope_cards(f.id);
            let mut m = vec![0.0; cards[slot]];
            for (idx, q) in b.factor[f.id].iter().enumerate() {
                let mut a = vec![0; cards.len()];
                crfkit::graph::decode(&cards, idx, &mut a);
                m[a[slot]] += q;
            }
            for (x, y) in m.iter().zip(&b.node[v]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
    let e = enumerate_graph(&g, &pot);
    assert!(max_diff(&b.node, &e.node) < 0.02);
    assert!((b.log_z - e.log_z).abs() < 0.05);
}

#[test]
fn warm_start_reaches_the_same_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (g, pot) = small_grid(&mut rng, 0.3);
    let config = BpConfig { max_iters: 500, tolerance: 1e-12, damping: 0.0 };
    let (cold, msgs) = loopy_bp_warm(&g, &pot, config, MessageSet::uniform(&g)).unwrap();
    let (warm, _) = loopy_bp_warm(&g, &pot, config, msgs).unwrap();
    assert!(warm.iterations <= 2);
    assert!(max_diff(&cold.node, &warm.node) < 1e-10);
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn gibbs_marginals_converge_on_small_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for trial in 0..3 {
        let g = random_tree(&mut rng, 4, 3, 3);
        let pot = random_potentials(&mut rng, &g, 1.0);
        let e = enumerate_graph(&g, &pot);
        let s = gibbs_run(
            &g,
            &pot,
            &GibbsConfig { sweeps: 100_000, burn_in: 1000, thinning: 1, seed: trial, init: None },
        )
        .unwrap();
        for (emp, exact) in s.node_marginals(&g).iter().zip(&e.node) {
            assert!(total_variation(emp, exact) < 0.02);
        }
    }
}

#[test]
fn gibbs_conditionals_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..50 {
        let g = random_tree(&mut rng, 4, 3, 3);
        let pot = random_potentials(&mut rng, &g, 2.0);
        let e = enumerate_graph(&g, &pot);
        let y = random_assignment(&mut rng, &g);
        for s in 0..4 {
            let c = gibbs_conditional(&g, &pot, &y, s).unwrap();
            let mut joint: Vec<f64> = (0..g.cardinality(s))
                .map(|v| {
                    let mut z = y.clone();
                    z[s] = v;
                    e.joint(&z)
                })
                .collect();
            let total: f64 = joint.iter().sum();
            joint.iter_mut().for_each(|p| *p /= total);
            for (a, b) in c.iter().zip(&joint) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gibbs_is_reproducible_from_its_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let g = random_tree(&mut rng, 4, 3, 3);
    let pot = random_potentials(&mut rng, &g, 1.0);
    let config = GibbsConfig { sweeps: 200, burn_in: 10, thinning: 3, seed: 9, init: None };
    let a = gibbs_run(&g, &pot, &config).unwrap();
    let b = gibbs_run(&g, &pot, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), (200usize - 10).div_ceil(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beliefs_are_distributions(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_tree(&mut rng, n, 3, 3);
        let pot = random_potentials(&mut rng, &g, 3.0);
        let b = tree_bp(&g, &pot).unwrap();
        for q in b.node.iter().chain(&b.factor) {
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(q.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
        }
    }

    #[test]
    fn bethe_estimate_is_exact_on_trees(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_tree(&mut rng, 5, 3, 3);
        let pot = random_potentials(&mut rng, &g, 1.0);
        let b = tree_bp(&g, &pot).unwrap();
        let e = enumerate_graph(&g, &pot);
        prop_assert!((b.log_z - e.log_z).abs() < 1e-8);
    }
}
