//! End-to-end fixture runs of the simulation harness.

use std::path::PathBuf;

use coexplore::sim::{run, Scenario, Strategy};

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/scenarios")
        .join(name);
    Scenario::load(&path).expect("fixture scenario loads")
}

#[test]
fn single_agent_covers_empty_room() {
    let scenario = fixture("empty_single.toml");
    let log = run(&scenario).expect("run completes without fault");
    let summary = log.summary.expect("finished run has a summary");
    assert!(
        summary.completed,
        "coverage stalled at {:.3} after {:.0}s",
        summary.covered_fraction, summary.exploration_time_s
    );
    assert!(summary.covered_fraction >= 0.99);
    assert_eq!(summary.final_submaps, 1);
    assert!(summary.exploration_time_s < scenario.time_limit_s);
    // Coverage fraction never decreases.
    let mut last = 0.0;
    for row in &log.rows {
        assert!(row.covered_fraction >= last - 1e-12);
        last = row.covered_fraction;
    }
}

#[test]
fn idle_agent_stays_put() {
    // An agent with an empty path must not move or accumulate odometry:
    // drop it in a fully covered... simplest: run one tick manually.
    let scenario = fixture("empty_single.toml");
    let mut sim = coexplore::sim::Simulation::new(&scenario).unwrap();
    // Tick 0 runs the first cycle and assigns a path; before that the agent
    // has no waypoints and must stay exactly at its spawn.
    sim.step().unwrap();
    let row = &sim.log().rows[0];
    assert_eq!(row.agents[0].odometer, 0.0);
    assert!((row.agents[0].x - 20.0).abs() < 1e-9);
}

#[test]
fn rerun_is_bit_identical() {
    let scenario = fixture("empty_single.toml");
    let a = run(&scenario).unwrap().to_ndjson();
    let b = run(&scenario).unwrap().to_ndjson();
    assert_eq!(a, b);
}

#[test]
fn strategy_parses() {
    assert_eq!("MUI".parse::<Strategy>().unwrap(), Strategy::Mui);
    assert!("bogus".parse::<Strategy>().is_err());
}
