//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails. Runs with `cargo test --workspace` (no libtest harness).

mod coco;
mod extraction;
mod gradient;
mod involution;
mod partition;
mod sigma;
mod stream;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// The CLI binary under test, logging silenced.
pub fn corecurate() -> std::process::Command {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_corecurate"));
    cmd.env("CORECURATE_LOG", "error");
    cmd
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let secs = Duration::from_secs;
    vec![
        Criterion { id: 1, name: "sigma exactness", budget: secs(1), run: sigma::run },
        Criterion { id: 2, name: "partition apportionment", budget: secs(10), run: partition::run },
        Criterion { id: 3, name: "augmentation involutions", budget: secs(30), run: involution::run },
        Criterion { id: 4, name: "metric oracle equivalence", budget: secs(60), run: coco::run },
        Criterion { id: 5, name: "learner gradient check", budget: secs(10), run: gradient::run },
        Criterion { id: 6, name: "forgetting experiment", budget: secs(300), run: stream::forgetting },
        Criterion { id: 7, name: "end-to-end determinism", budget: secs(300), run: stream::determinism },
        Criterion { id: 8, name: "extraction oracle", budget: secs(1), run: extraction::run },
        Criterion { id: 9, name: "config sweep", budget: secs(300), run: stream::sweep },
    ]
}

fn main() {
    // libtest flags such as --nocapture may be passed through; a bare word
    // selects criteria by id or name fragment.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria() {
        if !filters.is_empty()
            && !filters.iter().any(|f| *f == c.id.to_string() || c.name.contains(f.as_str()))
        {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; over the {:?} budget", c.budget))
            }
        });
        match result {
            Ok(detail) => println!(
                "criterion {} ({}): PASS [{:.2}s] {detail}",
                c.id,
                c.name,
                elapsed.as_secs_f64()
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {} ({}): FAIL [{:.2}s] {detail}",
                    c.id,
                    c.name,
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
