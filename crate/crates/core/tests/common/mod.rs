#![allow(dead_code)]

use rand::Rng;
use spectrum_share::cli::load_scenario;
use spectrum_share::{AllocationProblem, Entry, Scenario, Utility};

pub const TABLE1: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/table1.scenario");

pub fn table1() -> Scenario<f64> {
    load_scenario(TABLE1).expect("bundled scenario loads")
}

pub fn table1_with(rs: f64, rb: f64) -> Scenario<f64> {
    table1()
        .with_small_cell_capacity("s", rs)
        .unwrap()
        .with_macro_capacity(rb)
        .unwrap()
}

pub fn sig(a: f64, b: f64) -> Utility {
    Utility::sigmoidal(a, b).unwrap()
}

pub fn log(k: f64, r_max: f64) -> Utility {
    Utility::logarithmic(k, r_max).unwrap()
}

/// SUEs 1..4 of the bundled scenario.
pub fn table1_sues() -> Vec<Utility> {
    vec![
        sig(3.0, 20.0),
        sig(1.0, 30.0),
        log(3.0, 100.0),
        log(0.5, 100.0),
    ]
}

pub fn table1_small_cell(capacity: f64) -> AllocationProblem<f64> {
    let entries = table1_sues()
        .into_iter()
        .enumerate()
        .map(|(i, u)| Entry::new(format!("{}", i + 1), u, 0.0))
        .collect();
    AllocationProblem::new(entries, capacity).unwrap()
}

/// Utility with parameters in the ranges the bundled scenario uses.
pub fn random_table_utility<R: Rng>(rng: &mut R) -> Utility {
    if rng.gen_bool(0.5) {
        sig(rng.gen_range(1.0..=5.0), rng.gen_range(10.0..=30.0))
    } else {
        log(rng.gen_range(0.5..=15.0), 100.0)
    }
}

pub fn random_instance<R: Rng>(rng: &mut R, with_offsets: bool) -> AllocationProblem<f64> {
    let n = rng.gen_range(2..=4);
    let capacity = rng.gen_range(10.0..=100.0);
    let entries = (0..n)
        .map(|i| {
            let offset = if with_offsets && rng.gen_bool(0.5) {
                rng.gen_range(0.0..30.0)
            } else {
                0.0
            };
            Entry::new(format!("u{i}"), random_table_utility(rng), offset)
        })
        .collect();
    AllocationProblem::new(entries, capacity).unwrap()
}
