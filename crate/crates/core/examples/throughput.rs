//! Events per second for one critical-regime trajectory.

use std::time::Instant;

use slowbond::engine::{simulate, ObserverSet};
use slowbond::lattice::{sample_stationary, Beta, SlowBondParams};

fn main() {
    let n = 100;
    let sites = 8 * n;
    let params = SlowBondParams::new(n, 1.0, Beta::Finite(1.0)).unwrap();
    let init = sample_stationary(0.5, sites, 1).unwrap();
    let observers = ObserverSet {
        watched_bonds: vec![sites - 1, 19],
        tagged_site: None,
    };
    let start = Instant::now();
    let traj = simulate(params, init, 0.5, 7, &observers, &[]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} events in {secs:.3}s: {:.3e}/s",
        traj.events,
        traj.events as f64 / secs
    );
}
