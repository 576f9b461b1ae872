use augpd_core::{
    dynamics::{feedforward_transform, PerturbedController},
    evaluate_cost, nominal_controller, reference_solution, simulate, transient_metrics, verify_identities,
    verify_optimality, AugmentationProfile, Block, ConsensusProblem, CouplingProblem, Error, Function64, Graph, Matrix,
    Perturbation, Problem, Problem64, Reference, RoutingMatrix, System, System64, Variant,
};

type F = Function64;

const THETA0: [f64; 3] = [2.0, 0.5, 1.5];

fn triangle() -> Graph {
    Graph::new(&["v1", "v2", "v3"], &[("e1", "v1", "v2"), ("e2", "v1", "v3"), ("e3", "v2", "v3")]).unwrap()
}

fn example_objectives() -> Vec<F> {
    vec![F::quadratic(0.5, 1.0), F::exponential(1.0, -0.5), F::neg_log(1.0, 0.0)]
}

fn example() -> Problem64 {
    Problem::Consensus(ConsensusProblem::unconstrained(&triangle(), example_objectives()).unwrap())
}

fn standard(p: &Problem64) -> System64 {
    System::new(p.clone(), AugmentationProfile::standard(p), Variant::Consensus).unwrap()
}

fn auxiliary(p: &Problem64) -> System64 {
    let one = Block::integrator(1.0);
    let profile = AugmentationProfile::uniform(p, Block::new(vec![0.5, 0.5], vec![2.0]), Block::new(vec![1.0, 0.5], vec![1.0]), one, 0.0);
    System::new(p.clone(), profile, Variant::Consensus).unwrap()
}

fn feedforward(p: &Problem64) -> System64 {
    let one = Block::integrator(1.0);
    System::new(p.clone(), AugmentationProfile::uniform(p, one.clone(), one.clone(), one, 1.0), Variant::FeedForward).unwrap()
}

fn tree4() -> Problem64 {
    let g = Graph::new(&["n1", "n2", "n3", "n4"], &[("e1", "n1", "n2"), ("e2", "n2", "n3"), ("e3", "n2", "n4")]).unwrap();
    let f = vec![F::quadratic(1.0, 1.0), F::quadratic(-0.5, 2.0), F::quadratic(2.0, 0.5), F::quadratic(0.0, 1.5)];
    Problem::Consensus(ConsensusProblem::unconstrained(&g, f).unwrap())
}

fn tree4_profile(p: &Problem64, edge_ff: f64) -> AugmentationProfile<f64> {
    AugmentationProfile::uniform(
        p,
        Block::new(vec![1.0, 0.5], vec![1.5]),
        Block::integrator(1.0),
        Block::new(vec![1.0, 0.5], vec![2.0]),
        edge_ff,
    )
}

#[test]
fn standard_run_reaches_the_bisection_optimum() {
    let p = example();
    let sys = standard(&p);
    let s0 = sys.chain_state(&THETA0, &[], &[0.0; 3]).unwrap();
    let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-3, 200.0).unwrap();
    let star = reference_solution(&p).unwrap().theta_star;
    let eq = augpd_core::equilibrium_of(&sys, &traj, 1000).unwrap();
    assert!(eq.converged);
    let theta: Vec<f64> = (0..3).map(|i| eq.state.xi[i]).collect();
    for (t, s) in theta.iter().zip(&star) {
        assert!((t - s).abs() < 1e-5);
    }
}

#[test]
fn augmentation_damps_oscillations_and_speeds_settling() {
    let p = example();
    let star = reference_solution(&p).unwrap().theta_star;
    let metrics: Vec<_> = [standard(&p), auxiliary(&p), feedforward(&p)]
        .iter()
        .map(|sys| {
            let s0 = sys.chain_state(&THETA0, &[], &[0.0; 3]).unwrap();
            let traj = simulate(sys, &nominal_controller(sys), &s0, 1e-3, 100.0).unwrap();
            transient_metrics(&traj, &star, 0.02).unwrap()
        })
        .collect();
    let settle = |k: usize| metrics[k].settling_time.unwrap();
    assert!(metrics[0].oscillation_count > metrics[1].oscillation_count);
    assert!(metrics[0].oscillation_count > metrics[2].oscillation_count);
    assert!(settle(0) > settle(1) && settle(0) > settle(2));
}

#[test]
fn integrator_order_on_the_example() {
    let p = example();
    let sys = auxiliary(&p);
    let s0 = sys.chain_state(&THETA0, &[], &[0.0; 3]).unwrap();
    let end = |dt: f64| {
        let traj = simulate(&sys, &nominal_controller(&sys), &s0, dt, 5.0).unwrap();
        traj.states.last().unwrap().flatten()
    };
    let (a, b, c) = (end(4e-3), end(2e-3), end(1e-3));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let order = (diff(&a, &b) / diff(&b, &c)).log2();
    assert!(order >= 3.0, "observed order {order}");
}

#[test]
fn constant_and_diverging_runs() {
    let p = example();
    let sys = standard(&p);
    let star = reference_solution(&p).unwrap();
    let s0 = sys.chain_state(&star.theta_star, &[], &star.mu_star).unwrap();
    let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-2, 1.0).unwrap();
    let eq = augpd_core::equilibrium_of(&sys, &traj, 10).unwrap();
    assert!(eq.converged && eq.movement < 1e-12);

    // linear objectives have no minimizer, so the states drift forever
    let drift = Problem::Consensus(ConsensusProblem::unconstrained(&triangle(), vec![F::affine(1.0, 0.0); 3]).unwrap());
    let sys = standard(&drift);
    let s0 = sys.chain_state(&[1.0; 3], &[], &[0.0; 3]).unwrap();
    let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-2, 10.0).unwrap();
    assert!(!augpd_core::equilibrium_of(&sys, &traj, 100).unwrap().converged);
    assert!(matches!(Reference::from_trajectory(&sys, &traj), Err(Error::Precondition(_))));

    let sys = standard(&p);
    let s0 = sys.chain_state(&[1.0, 1.0, -1.0], &[], &[0.0; 3]).unwrap();
    match simulate(&sys, &nominal_controller(&sys), &s0, 1e-3, 1.0) {
        Err(Error::EntityDomain { entity, .. }) => assert_eq!(entity, "node 2"),
        other => panic!("{:?}", other.map(|t| t.len())),
    }
}

#[test]
fn tree_perturbations_only_add_their_own_energy() {
    let p = tree4();
    let sys = System::new(p.clone(), tree4_profile(&p, 0.0), Variant::Consensus).unwrap();
    let s0 = sys.chain_state(&[2.0, -1.0, 0.5, 1.0], &[], &[0.0; 3]).unwrap();
    let report = verify_optimality(&sys, &s0, 1e-3, 100.0, 4, 7).unwrap();
    assert!(report.value_identity_error < 1e-4);
    assert_eq!(report.not_applicable, 0);
    assert!(report.max_relative_error.unwrap() < 1e-3);
    assert!(report.excess_nonnegative);
}

#[test]
fn empty_perturbation_reproduces_the_nominal_cost() {
    let p = tree4();
    let sys = System::new(p.clone(), tree4_profile(&p, 0.0), Variant::Consensus).unwrap();
    let s0 = sys.chain_state(&[2.0, -1.0, 0.5, 1.0], &[], &[0.0; 3]).unwrap();
    let nominal = nominal_controller(&sys);
    let a = simulate(&sys, &nominal, &s0, 1e-3, 60.0).unwrap();
    let channels = augpd_core::ControlInput::<f64>::zeros(sys.layout()).len();
    let perturbed = PerturbedController { nominal, perturbation: Perturbation::zero(channels) };
    let b = simulate(&sys, &perturbed, &s0, 1e-3, 60.0).unwrap();
    let r = Reference::from_trajectory(&sys, &a).unwrap();
    assert_eq!(evaluate_cost(&sys, &a, &r).unwrap(), evaluate_cost(&sys, &b, &r).unwrap());
}

#[test]
fn feedforward_forms_agree_and_satisfy_the_value_identity() {
    let p = tree4();
    let direct = System::new(p.clone(), tree4_profile(&p, 1.0), Variant::Consensus).unwrap();
    let ff = feedforward_transform(&direct).unwrap();
    let s0 = ff.chain_state(&[2.0, -1.0, 0.5, 1.0], &[], &[0.0; 3]).unwrap();
    let a = simulate(&direct, &nominal_controller(&direct), &s0, 1e-3, 100.0).unwrap();
    let b = simulate(&ff, &nominal_controller(&ff), &s0, 1e-3, 100.0).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        for (u, v) in x.theta.iter().zip(&y.theta) {
            assert!((u - v).abs() < 1e-6);
        }
    }
    let r = Reference::from_trajectory(&ff, &b).unwrap();
    let cost = evaluate_cost(&ff, &b, &r).unwrap();
    assert!((cost.total_cost - cost.storage_at_start).abs() / cost.storage_at_start < 1e-4);
    assert!(cost.state_terms.disagreement > 0.0);
    assert!(verify_identities(&ff, &b, &r).unwrap().passes());
}

#[test]
fn coupling_instance_matches_its_oracle() {
    let routing = RoutingMatrix::new(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
    let p = Problem::Coupling(CouplingProblem::new(routing, vec![F::quadratic(2.0, 1.0); 2], vec![F::affine(1.0, -1.0)]).unwrap());
    let one = Block::integrator(1.0);
    let profile = AugmentationProfile::uniform(&p, Block::new(vec![0.5, 0.5], vec![2.0]), Block::new(vec![1.0, 0.5], vec![1.0]), one, 0.0);
    let sys = System::new(p, profile, Variant::CouplingInequality).unwrap();
    let s0 = sys.chain_state(&[0.0, 1.0], &[0.0], &[]).unwrap();
    let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-3, 100.0).unwrap();
    let r = Reference::from_trajectory(&sys, &traj).unwrap();
    for t in &r.theta {
        assert!((t - 0.5).abs() < 1e-4);
    }
    assert!((r.lambda[0] - 3.0).abs() < 1e-4);
    let cost = evaluate_cost(&sys, &traj, &r).unwrap();
    assert!((cost.total_cost - cost.storage_at_start).abs() / cost.storage_at_start < 1e-4);
    let ids = verify_identities(&sys, &traj, &r).unwrap();
    assert!(ids.passes() && ids.interconnection_residual.is_none());
}

#[test]
fn inactive_and_active_local_constraints() {
    let g = triangle();
    for (cons, expected) in [
        (vec![Some(F::affine(1.0, -2.0)); 3], 1.0991807754952996),
        (vec![Some(F::affine(1.0, -0.8)), None, Some(F::affine(1.0, -1.5))], 0.8),
    ] {
        let p = Problem::Consensus(ConsensusProblem::on_graph(&g, example_objectives(), cons).unwrap());
        let sys = auxiliary(&p);
        let s0 = sys.chain_state(&THETA0, &[0.0; 3], &[0.0; 3]).unwrap();
        let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-3, 100.0).unwrap();
        assert!(traj.states.iter().all(|s| s.tau.iter().all(|t| *t >= -1e-12)));
        let r = Reference::from_trajectory(&sys, &traj).unwrap();
        r.check_against(&reference_solution(&p).unwrap(), 1e-5).unwrap();
        assert!((r.theta[0] - expected).abs() < 1e-5);
        let ids = verify_identities(&sys, &traj, &r).unwrap();
        assert!(ids.passes(), "{ids:?}");
        assert!(ids.constraint_slack.unwrap() >= -1e-8);
    }
}

#[test]
fn single_precision_run_converges() {
    let g = triangle();
    let f = vec![
        augpd_core::ScalarConvexFunction::<f32>::quadratic(0.5, 1.0),
        augpd_core::ScalarConvexFunction::exponential(1.0, -0.5),
        augpd_core::ScalarConvexFunction::neg_log(1.0, 0.0),
    ];
    let p = Problem::Consensus(ConsensusProblem::unconstrained(&g, f).unwrap());
    let one = Block::integrator(1.0f32);
    let profile = AugmentationProfile::uniform(&p, Block::new(vec![0.5, 0.5], vec![2.0]), one.clone(), one, 0.0);
    let sys = System::new(p, profile, Variant::Consensus).unwrap();
    let s0 = sys.chain_state(&[2.0, 0.5, 1.5], &[], &[0.0; 3]).unwrap();
    let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-2, 40.0).unwrap();
    for t in &traj.final_outputs().theta {
        assert!((t - 1.0991808f32).abs() < 1e-4);
    }
}
