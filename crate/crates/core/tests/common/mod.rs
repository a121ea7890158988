#![allow(dead_code)]

use ltvobs_core::scenario::{load_scenario, Scenario};
use ltvobs_core::MatrixExpr;

pub fn benchmark() -> Scenario {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/scenarios/paper_sec6.scenario");
    load_scenario(path).expect("bundled scenario loads")
}

pub fn grid(rows: &[&[&str]]) -> MatrixExpr {
    let owned: Vec<Vec<&str>> = rows.iter().map(|r| r.to_vec()).collect();
    MatrixExpr::parse_grid(&owned).unwrap()
}
