//! End-to-end acceptance checks. Runs every criterion, prints one
//! PASS/FAIL line each, and exits non-zero if any failed.
//!
//! `cargo test -p splatsr-core --test acceptance [-- <filter>...]`

#[path = "../common/mod.rs"]
mod common;

mod densify_oracle;
mod gradients;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "conservation", budget: minutes(2), run: properties::conservation },
        Criterion { id: 2, name: "gradients", budget: minutes(5), run: gradients::run },
        Criterion { id: 3, name: "densification-oracle", budget: minutes(1), run: densify_oracle::run },
        Criterion { id: 4, name: "contraction-and-field", budget: minutes(1), run: properties::contraction_and_field },
        Criterion { id: 5, name: "refinement-lattice", budget: minutes(1), run: properties::refinement_lattice },
        Criterion { id: 6, name: "depth-reductions", budget: minutes(1), run: properties::depth_reductions },
        Criterion { id: 7, name: "uncertainty-weighting", budget: minutes(1), run: properties::uncertainty_weighting },
        Criterion { id: 8, name: "backprojection", budget: minutes(1), run: properties::backprojection },
        Criterion { id: 9, name: "coarse-convergence", budget: minutes(15), run: training::coarse_convergence },
        Criterion { id: 10, name: "fine-stage-efficacy", budget: minutes(30), run: training::fine_efficacy },
        Criterion { id: 11, name: "densification-ablation", budget: minutes(30), run: training::densification_ablation },
        Criterion { id: 12, name: "determinism", budget: minutes(5), run: training::determinism },
    ]
}

fn main() {
    // libtest-style flags such as --nocapture are accepted and ignored
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<Criterion> = criteria()
        .into_iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f))
        .collect();
    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.budget => Err(format!("{d}; took {took:.1?}, budget {:?}", c.budget)),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {:>2} {} ({took:.1?}): {d}", c.id, c.name),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {} ({took:.1?}): {e}", c.id, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

/// `Err(msg)` unless `ok`.
pub fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}
