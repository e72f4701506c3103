//! Exact continuous-time simulation of the slow-bond exclusion process.
//!
//! Every bond carries an exponential clock; the superposition has constant
//! total rate `R = (sites - 1) + slow_rate`. Between two observation times the
//! number of rings is therefore Poisson(`R * dt`) and each ring picks its bond
//! independently (slow bond with probability `slow_rate / R`, otherwise a
//! uniform unit bond). Rings on bonds with equal occupancies are no-ops and do
//! not touch the observers.

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::lattice::{Configuration, SlowBondParams};
use crate::rng::{seeded, SimRng};

/// Largest Poisson mean accepted for a single observation interval. Beyond
/// this the f64 event count stops being exact.
const MAX_INTERVAL_EVENTS: f64 = 4.0e15;

const UNWATCHED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationClock {
    pub micro_time: f64,
    pub macro_time: f64,
}

impl SimulationClock {
    pub fn at_macro(macro_time: f64, n: usize) -> Self {
        let n2 = (n as f64) * (n as f64);
        Self {
            micro_time: macro_time * n2,
            macro_time,
        }
    }
}

/// Which observables to track during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ObserverSet {
    pub watched_bonds: Vec<usize>,
    pub tagged_site: Option<usize>,
}

/// Signed crossing counts; positive means from `b` to `b + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CurrentObserver {
    watched_bonds: Vec<usize>,
    counts: Vec<i64>,
}

impl CurrentObserver {
    fn new(watched_bonds: Vec<usize>) -> Self {
        let counts = vec![0; watched_bonds.len()];
        Self { watched_bonds, counts }
    }

    pub fn watched_bonds(&self) -> &[usize] {
        &self.watched_bonds
    }

    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    pub fn current_at(&self, bond: usize) -> Result<i64> {
        match self.watched_bonds.iter().position(|&b| b == bond) {
            Some(slot) => Ok(self.counts[slot]),
            None => usage(format!("bond {bond} is not watched")),
        }
    }

    /// `J / sqrt(n)`.
    pub fn rescaled_current(&self, bond: usize, n: usize) -> Result<f64> {
        Ok(self.current_at(bond)? as f64 / (n as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaggedObserver {
    pub origin: usize,
    pub position: usize,
    /// Net signed displacement, counting windings around the torus.
    pub displacement: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub clock: SimulationClock,
    pub config: Configuration,
    pub currents: Vec<i64>,
    pub tagged: Option<TaggedObserver>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub currents: CurrentObserver,
    pub tagged: Option<TaggedObserver>,
    pub final_config: Configuration,
    pub clock: SimulationClock,
    pub events: u64,
    pub effective_jumps: u64,
}

/// Stepper holding the state of one trajectory.
///
/// Use [`simulate`] for a one-shot run; the stepper is exposed for callers
/// that reduce each snapshot on the fly instead of storing configurations.
pub struct Simulator {
    params: SlowBondParams,
    config: Configuration,
    rng: SimRng,
    watch_slot: Vec<u32>,
    currents: CurrentObserver,
    tagged: Option<TaggedObserver>,
    clock: SimulationClock,
    events: u64,
    effective_jumps: u64,
}

impl Simulator {
    pub fn new(params: SlowBondParams, init: Configuration, seed: u64, observers: &ObserverSet) -> Result<Self> {
        let sites = init.len();
        let mut watch_slot = vec![UNWATCHED; sites];
        for (slot, &b) in observers.watched_bonds.iter().enumerate() {
            if b >= sites {
                return usage(format!("watched bond {b} out of range 0..{sites}"));
            }
            if watch_slot[b] != UNWATCHED {
                return usage(format!("bond {b} watched twice"));
            }
            watch_slot[b] = slot as u32;
        }
        let tagged = match observers.tagged_site {
            Some(x) if x >= sites => return usage(format!("tagged site {x} out of range 0..{sites}")),
            Some(x) if init.get(x) != 1 => {
                return usage(format!("tagged site {x} is empty in the initial configuration"))
            }
            Some(x) => Some(TaggedObserver {
                origin: x,
                position: x,
                displacement: 0,
            }),
            None => None,
        };
        Ok(Self {
            params,
            config: init,
            rng: seeded(seed),
            watch_slot,
            currents: CurrentObserver::new(observers.watched_bonds.clone()),
            tagged,
            clock: SimulationClock::at_macro(0.0, params.n()),
            events: 0,
            effective_jumps: 0,
        })
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn currents(&self) -> &CurrentObserver {
        &self.currents
    }

    pub fn tagged(&self) -> Option<TaggedObserver> {
        self.tagged
    }

    pub fn clock(&self) -> SimulationClock {
        self.clock
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn total_rate(&self) -> f64 {
        (self.config.len() - 1) as f64 + self.params.slow_rate()
    }

    /// Runs the dynamics forward to `macro_time` (no-op if already there).
    pub fn advance_to(&mut self, macro_time: f64) -> Result<()> {
        if !macro_time.is_finite() {
            return usage(format!("macro time {macro_time} is not finite"));
        }
        if macro_time < self.clock.macro_time {
            return usage(format!(
                "cannot move backwards from macro time {} to {macro_time}",
                self.clock.macro_time
            ));
        }
        let target = SimulationClock::at_macro(macro_time, self.params.n());
        let lambda = self.total_rate() * (target.micro_time - self.clock.micro_time);
        if lambda > MAX_INTERVAL_EVENTS {
            return Err(Error::Numerical(format!(
                "interval would need ~{lambda:.3e} events; split the horizon with more snapshots"
            )));
        }
        let count = if lambda > 0.0 {
            let pois = Poisson::new(lambda).map_err(|e| Error::Numerical(format!("poisson({lambda}): {e}")))?;
            pois.sample(&mut self.rng) as u64
        } else {
            0
        };
        self.run_events(count)?;
        self.clock = target;
        Ok(())
    }

    fn run_events(&mut self, count: u64) -> Result<()> {
        let sites = self.config.len();
        let unit = (sites - 1) as f64;
        let total = unit + self.params.slow_rate();
        let scale = total / (1u64 << 53) as f64;
        let occ = self.config.occupancy_mut();
        let watch = &self.watch_slot;
        let counts = &mut self.currents.counts;
        let mut tagged = self.tagged;
        let mut effective = 0u64;
        for _ in 0..count {
            let v = (self.rng.next_u64() >> 11) as f64 * scale;
            let bond = if v < unit { v as usize } else { sites - 1 };
            let right = if bond + 1 == sites { 0 } else { bond + 1 };
            let a = occ[bond];
            let b = occ[right];
            if a == b {
                continue;
            }
            occ[bond] = b;
            occ[right] = a;
            effective += 1;
            // a == 1: particle moved bond -> right.
            let dir: i64 = if a == 1 { 1 } else { -1 };
            let slot = watch[bond];
            if slot != UNWATCHED {
                counts[slot as usize] += dir;
            }
            if let Some(t) = tagged.as_mut() {
                if a == 1 && t.position == bond {
                    t.position = right;
                    t.displacement += 1;
                } else if b == 1 && t.position == right {
                    t.position = bond;
                    t.displacement -= 1;
                }
            }
        }
        self.tagged = tagged;
        self.events = self
            .events
            .checked_add(count)
            .ok_or_else(|| Error::Numerical("event counter overflow".into()))?;
        self.effective_jumps += effective;
        if let Some(t) = self.tagged {
            if self.config.get(t.position) != 1 {
                return Err(Error::Bookkeeping(format!(
                    "tagged particle lost: site {} is empty",
                    t.position
                )));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            clock: self.clock,
            config: self.config.clone(),
            currents: self.currents.counts.clone(),
            tagged: self.tagged,
        }
    }

    pub fn into_trajectory(self, snapshots: Vec<Snapshot>) -> Trajectory {
        Trajectory {
            snapshots,
            currents: self.currents,
            tagged: self.tagged,
            final_config: self.config,
            clock: self.clock,
            events: self.events,
            effective_jumps: self.effective_jumps,
        }
    }
}

/// Simulates to micro time `macro_horizon * n^2`, recording a snapshot at
/// each requested macro time. Deterministic given `seed`.
pub fn simulate(
    params: SlowBondParams,
    init: Configuration,
    macro_horizon: f64,
    seed: u64,
    observers: &ObserverSet,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    if !(macro_horizon >= 0.0) || !macro_horizon.is_finite() {
        return usage(format!("macro horizon must be finite and >= 0, got {macro_horizon}"));
    }
    check_snapshot_times(snapshot_times, macro_horizon)?;
    let mut sim = Simulator::new(params, init, seed, observers)?;
    let mut snapshots = Vec::with_capacity(snapshot_times.len());
    for &t in snapshot_times {
        sim.advance_to(t)?;
        snapshots.push(sim.snapshot());
    }
    sim.advance_to(macro_horizon)?;
    Ok(sim.into_trajectory(snapshots))
}

pub(crate) fn check_snapshot_times(times: &[f64], horizon: f64) -> Result<()> {
    for w in times.windows(2) {
        if !(w[0] <= w[1]) {
            return usage("snapshot times must be sorted");
        }
    }
    if let Some(&t) = times.iter().find(|&&t| !(0.0..=horizon).contains(&t)) {
        return usage(format!("snapshot time {t} outside [0, {horizon}]"));
    }
    Ok(())
}

/// Checks `{X >= k} <=> {J >= sum_{x=s}^{s+k-1} eta(x)}` for `k = 1..=k_max`,
/// where `s` is the tagged particle's origin, `X` its displacement and `J` the
/// current through the bond `(s - 1, s)`. Returns the first `k` that fails.
pub fn order_identity_violation(
    config: &Configuration,
    current: i64,
    tagged: &TaggedObserver,
    k_max: usize,
) -> Option<usize> {
    let sites = config.len();
    let mut mass = 0i64;
    for k in 1..=k_max {
        mass += config.get((tagged.origin + k - 1) % sites) as i64;
        let left = tagged.displacement >= k as i64;
        let right = current >= mass;
        if left != right {
            return Some(k);
        }
    }
    None
}
