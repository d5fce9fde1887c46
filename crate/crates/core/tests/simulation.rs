use doboc::algorithms::{AlgoConfig, Algorithm};
use doboc::analysis::closed_form_ghat;
use doboc::fixtures;
use doboc::graph::CommGraph;
use doboc::objectives::{random_quadratic_family, PenaltyProblem, StackedVector};
use doboc::simulator::{CommStats, Simulator};
use doboc::verify::random_points;

fn ring(n: usize, p: usize, seed: u64) -> PenaltyProblem {
    let graph = CommGraph::metropolis(n, &fixtures::ring_edges(n)).unwrap();
    let locals = random_quadratic_family(n, p, (1.0, 5.0), seed).unwrap();
    PenaltyProblem::new(graph, locals, 0.5).unwrap()
}

#[test]
fn matches_dense_recursion_for_twenty_iterations() {
    for (name, prob) in fixtures::standard() {
        let sim = Simulator::new(&prob, 2).unwrap();
        for (algo, k_budget) in [(Algorithm::Doboc, None), (Algorithm::DobocK, Some(3))] {
            let mut cfg = AlgoConfig::new(1.0 / prob.upper_bound(), prob.lambda());
            cfg.k_budget = k_budget;
            let mut x_sim = random_points(&prob, 1, 5).remove(0);
            let mut x_dense = x_sim.clone();
            let mut stats = CommStats::default();
            for k in 0..20 {
                x_sim = sim.step(algo, &cfg, k, &x_sim, &mut stats).unwrap();
                let inner = algo.inner_updates(k, &cfg);
                x_dense = x_dense.sub(&closed_form_ghat(&prob, &x_dense, cfg.eta, inner).unwrap());
                let diff = x_sim.sub(&x_dense).norm();
                assert!(
                    diff <= 1e-12 * x_dense.norm().max(1.0),
                    "{name} {algo} iteration {}: {diff:e}",
                    k + 1
                );
            }
        }
    }
}

#[test]
fn outputs_depend_only_on_nearby_agents() {
    // Agent 0 on an 8-ring; agent 4 is four hops away.
    let prob = ring(8, 2, 31);
    let sim = Simulator::new(&prob, 1).unwrap();
    let x = random_points(&prob, 1, 9).remove(0);
    let mut far = x.clone();
    far.block_mut(4)[0] += 3.0;
    far.block_mut(4)[1] -= 1.5;
    for k_budget in [1usize, 2, 3, 4] {
        let cfg = AlgoConfig::new(0.1, 0.5).with_k(k_budget);
        let a = sim.step(Algorithm::DobocK, &cfg, 0, &x, &mut CommStats::default()).unwrap();
        let b = sim.step(Algorithm::DobocK, &cfg, 0, &far, &mut CommStats::default()).unwrap();
        // K rounds carry information K hops.
        let same = a.block(0).iter().zip(b.block(0)).all(|(u, v)| u.to_bits() == v.to_bits());
        assert_eq!(same, k_budget < 4, "K = {k_budget}");
    }
    let cfg = AlgoConfig::new(0.5, 0.5);
    let a = sim.step(Algorithm::Dgd, &cfg, 0, &x, &mut CommStats::default()).unwrap();
    let b = sim.step(Algorithm::Dgd, &cfg, 0, &far, &mut CommStats::default()).unwrap();
    for i in [0, 1, 2, 6, 7] {
        assert_eq!(a.block(i), b.block(i), "agent {i}");
    }
    assert_ne!(a.block(4), b.block(4));
}

#[test]
fn fixture_a_stays_antisymmetric() {
    let prob = fixtures::fixture_a(1.0);
    let sim = Simulator::new(&prob, 1).unwrap();
    for algo in [Algorithm::Doboc, Algorithm::Dgd] {
        let cfg = AlgoConfig::new(0.3, 1.0).with_tol(0.0).with_max_iter(30);
        let x0 = StackedVector::from_blocks(vec![vec![1.7], vec![-1.7]]).unwrap();
        let mut x = x0;
        let mut stats = CommStats::default();
        for k in 0..30 {
            x = sim.step(algo, &cfg, k, &x, &mut stats).unwrap();
            assert_eq!(x.block(0)[0].to_bits(), (-x.block(1)[0]).to_bits(), "{algo} iteration {}", k + 1);
        }
    }
}

#[test]
fn doboc_converges_on_every_fixture() {
    for (name, prob) in fixtures::standard() {
        let sim = Simulator::new(&prob, 1).unwrap();
        let cfg = AlgoConfig::new(1.0 / prob.upper_bound(), prob.lambda()).with_max_iter(200);
        let trace = sim.run(Algorithm::Doboc, &cfg, &StackedVector::zeros(prob.n(), prob.p())).unwrap();
        assert_eq!(trace.status, doboc::simulator::RunStatus::Converged, "{name}");
        assert!(trace.last().f_gap.abs() < 1e-12, "{name}: {:e}", trace.last().f_gap);
        assert!(trace.last().err_x < 1e-9, "{name}");
    }
}

#[test]
fn doboc_beats_dgd_on_a_stable_penalty() {
    // λ small enough that the DGD step λ stays below 2/a.
    let graph = CommGraph::metropolis(5, &fixtures::ring_edges(5)).unwrap();
    let locals = random_quadratic_family(5, 3, (1.0, 10.0), fixtures::RING_SEED).unwrap();
    let prob = PenaltyProblem::new(graph, locals, 0.05).unwrap();
    assert!(prob.lambda() * prob.upper_bound() < 2.0);
    let sim = Simulator::new(&prob, 1).unwrap();
    let x0 = StackedVector::zeros(prob.n(), prob.p());
    let dgd = sim
        .run(Algorithm::Dgd, &AlgoConfig::new(0.05, 0.05).with_tol(0.0).with_max_iter(15), &x0)
        .unwrap();
    let doboc = sim
        .run(
            Algorithm::Doboc,
            &AlgoConfig::new(1.0 / prob.upper_bound(), 0.05).with_tol(0.0).with_max_iter(15),
            &x0,
        )
        .unwrap();
    assert!(dgd.last().err_x < dgd.initial.err_x);
    assert!(doboc.last().err_x < dgd.last().err_x);
}
