//! Finite-difference gradient checks for every layer type and for the whole
//! tiny network.

use d3net::blocks::{builtin, Model};
use d3net::gradcheck::{check_layers, check_model};

fn main() -> d3net::Result<()> {
    let tol = 1e-6;
    let mut results = check_layers(0, 1e-6)?;
    let model = Model::build(&builtin::builtin("tiny").expect("shipped config"), 0)?;
    results.push(check_model(&model, 4, 2, 0, 1e-6)?);
    for r in &results {
        println!(
            "{:<22} {:>10.2e}  {:>5} coords  {:>3} skipped  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            r.skipped,
            if r.passed(tol) { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
