mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectrum_share::{
    allocate, allocate_with, grid_search_allocate, stationarity_gap, AllocationProblem, Entry,
    Error, Grid, SolverOptions, UserId,
};

const STEP: f64 = 0.01;

fn check_kkt(problem: &AllocationProblem<f64>) {
    let alloc = allocate(problem).unwrap();
    let r = problem.capacity();
    assert!(
        (alloc.total() - r).abs() <= 1e-6 * r,
        "sum {} vs {}",
        alloc.total(),
        r
    );
    assert!(stationarity_gap(problem, &alloc) <= 1e-5);
    for e in problem.entries() {
        let rate = alloc.rate(&e.user_id).unwrap();
        assert!(rate >= 0.0 && rate <= r);
        if e.offset == 0.0 {
            assert!(rate > 0.0, "{} got zero", e.user_id);
        }
    }
}

fn check_oracle(problem: &AllocationProblem<f64>) {
    let alloc = allocate(problem).unwrap();
    let oracle =
        grid_search_allocate(problem, &Grid::new(STEP, problem.capacity()).unwrap()).unwrap();
    let solver_obj = alloc.objective;
    assert!(
        (solver_obj - oracle.objective).abs() <= 1e-4,
        "objective {} vs oracle {}",
        solver_obj,
        oracle.objective
    );
    // The oracle searches a subset of the feasible set, so it can only come out ahead by what the
    // solver leaves unallocated within its capacity tolerance, valued at the shadow price.
    let slack = alloc.shadow_price * (problem.capacity() - alloc.total()).abs() + 1e-9;
    assert!(
        oracle.objective <= solver_obj + slack,
        "oracle {} beats solver {}",
        oracle.objective,
        solver_obj
    );
    for (e, &o) in problem.entries().iter().zip(&oracle.rates) {
        let s = alloc.rate(&e.user_id).unwrap();
        assert!(
            (s - o).abs() <= 2.0 * STEP,
            "{}: solver {s} oracle {o}",
            e.user_id
        );
    }
}

#[test]
fn table1_small_cell_matches_oracle() {
    for capacity in [50.0, 70.0] {
        check_oracle(&table1_small_cell(capacity));
    }
}

#[test]
fn table1_small_cell_at_50_leaves_floors_unmet() {
    let problem = table1_small_cell(50.0);
    let alloc = allocate(&problem).unwrap();
    let reqs = [0.8, 0.8, 0.5, 0.5];
    for (i, (e, req)) in problem.entries().iter().zip(reqs).enumerate().skip(1) {
        let r = alloc.rate(&e.user_id).unwrap();
        assert!(
            e.utility.evaluate(r).unwrap() < req,
            "UE{} meets its floor",
            i + 1
        );
    }
}

#[test]
fn randomized_instances_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..12 {
        check_oracle(&random_instance(&mut rng, false));
    }
}

#[test]
fn offsets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        check_oracle(&random_instance(&mut rng, true));
    }
}

#[test]
fn kkt_on_random_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..300 {
        check_kkt(&random_instance(&mut rng, i % 2 == 0));
    }
}

#[test]
fn product_and_log_sum_agree() {
    let problem = table1_small_cell(50.0);
    let alloc = allocate(&problem).unwrap();
    let rates: Vec<f64> = problem
        .entries()
        .iter()
        .map(|e| alloc.rate(&e.user_id).unwrap())
        .collect();
    let product: f64 = problem
        .entries()
        .iter()
        .zip(&rates)
        .map(|(e, &r)| e.utility.evaluate(r).unwrap())
        .product();
    assert!((product.ln() - problem.objective(&rates)).abs() <= 1e-12);
    // any feasible perturbation lowers the product
    for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
        let mut moved = rates.clone();
        moved[i] += 0.05;
        moved[j] -= 0.05;
        assert!(problem.objective(&moved) < problem.objective(&rates));
    }
}

#[test]
fn demand_at_optimal_price_clears_capacity() {
    let problem = table1_small_cell(70.0);
    let alloc = allocate(&problem).unwrap();
    let demand = problem.demand_at_price(alloc.shadow_price).unwrap();
    let total: f64 = demand.values().sum();
    assert!((total - 70.0).abs() <= 1e-4);
    for (id, d) in &demand {
        assert!((d - alloc.rate(id).unwrap()).abs() <= 1e-3, "{id}");
    }
}

#[test]
fn single_user_takes_all() {
    let problem = AllocationProblem::new(vec![Entry::new("x", sig(3.0, 20.0), 0.0)], 42.0).unwrap();
    let alloc = allocate(&problem).unwrap();
    assert!((alloc.rate(&UserId::from("x")).unwrap() - 42.0).abs() <= 42e-6);
}

#[test]
fn empty_problem_is_rejected() {
    assert!(matches!(
        AllocationProblem::<f64>::new(vec![], 10.0),
        Err(Error::InvalidProblem(_))
    ));
}

#[test]
fn iteration_cap_reports_bracket() {
    let opts = SolverOptions {
        tol_cap_rel: 1e-15,
        max_iterations: 3,
        ..SolverOptions::default()
    };
    match allocate_with(&table1_small_cell(50.0), &opts) {
        Err(Error::SolverFailure { p_lo, p_hi, .. }) => assert!(p_lo < p_hi),
        other => panic!("expected solver failure, got {other:?}"),
    }
}

#[test]
fn trace_brackets_shrink() {
    let (alloc, trace) =
        allocate_with(&table1_small_cell(50.0), &SolverOptions::default()).unwrap();
    assert!(!trace.is_empty() && trace.len() <= 200);
    for w in trace.windows(2) {
        assert!(w[1].p_lo >= w[0].p_lo && w[1].p_hi <= w[0].p_hi);
    }
    let last = trace.last().unwrap();
    assert!(last.excess_demand.abs() <= 1e-6 * 50.0);
    assert_eq!(alloc.iterations, trace.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_nondecreasing_in_capacity(seed in any::<u64>(), c1 in 10.0f64..100.0, grow in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_instance(&mut rng, false);
        let small = AllocationProblem::new(base.entries().to_vec(), c1).unwrap();
        let large = AllocationProblem::new(base.entries().to_vec(), c1 + grow).unwrap();
        let a = allocate(&small).unwrap();
        let b = allocate(&large).unwrap();
        for e in base.entries() {
            let (ra, rb) = (a.rate(&e.user_id).unwrap(), b.rate(&e.user_id).unwrap());
            prop_assert!(rb >= ra - 1e-6 * (c1 + grow), "{}: {} -> {}", e.user_id, ra, rb);
        }
        prop_assert!(b.shadow_price <= a.shadow_price * (1.0 + 1e-9));
    }

    #[test]
    fn solver_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_instance(&mut rng, true);
        prop_assert_eq!(allocate(&problem).unwrap(), allocate(&problem).unwrap());
    }

    #[test]
    fn feasibility_and_stationarity(seed in any::<u64>(), offsets in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_kkt(&random_instance(&mut rng, offsets));
    }
}
