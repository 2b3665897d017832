//! Runs a bundled scenario and prints its report and the first few trace
//! records: `cargo run -p sakshi-core --example run_scenario -- faulty-server`.

use sakshi_core::harness;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "honest-baseline".into());
    let Some(scenario) = harness::bundled(&name) else {
        eprintln!("unknown scenario {name}; bundled: {:?}", harness::bundled_names().collect::<Vec<_>>());
        std::process::exit(2);
    };
    let out = harness::run(&scenario.expect("bundled scenarios are valid")).expect("run");
    println!("{}\n", out.report);
    for r in out.trace.records().iter().take(12) {
        println!("t{:<3} {:<10} {}", r.tick, r.actor, r.event);
    }
}
