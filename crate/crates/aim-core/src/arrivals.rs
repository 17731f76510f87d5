//! Poisson arrival streams with safe-admission gating.
//!
//! Each lane draws exponential inter-arrival times from its own seeded
//! generator (so one lane's rate never perturbs another's draws). A requested
//! arrival becomes an admission at the earliest simulation step at or after
//! the requested time whose safety gate passes: the candidate enters at the
//! approach start with the largest speed that both respects the limit and
//! could still stop before the conflict zone, and it must sit a safe
//! following distance behind the current lane tail. Blocked candidates retry
//! every step, strictly first-come-first-served within their lane.

use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::model::{LaneId, PhysicalParams, VehicleId, VehicleState};
use crate::safety;

/// Seed for one lane's generator, derived from the master seed so streams are
/// independent and stable under changes to the set of simulated lanes.
pub fn lane_stream_seed(master: u64, lane: LaneId) -> u64 {
    master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(lane as u64 + 1))
}

/// Uniform draw in `[0, 1)` with 53-bit resolution.
fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One lane's Poisson clock.
#[derive(Clone, Debug)]
pub struct LaneStream {
    rng: ChaCha8Rng,
    /// Arrival rate, veh/s.
    pub rate: f64,
    /// Absolute time of the last requested arrival, s.
    pub t: f64,
}

impl LaneStream {
    pub fn new(master_seed: u64, lane: LaneId, rate: f64) -> Self {
        LaneStream {
            rng: ChaCha8Rng::seed_from_u64(lane_stream_seed(master_seed, lane)),
            rate,
            t: 0.0,
        }
    }

    /// Next exponential inter-arrival delta (mean `1/rate`), by inverse CDF.
    pub fn next_arrival(&mut self) -> f64 {
        let u = unit_uniform(&mut self.rng);
        -(1.0 - u).ln() / self.rate
    }

    /// Advance the clock and return the next requested arrival time.
    pub fn next_request(&mut self) -> f64 {
        self.t += self.next_arrival();
        self.t
    }
}

/// A requested arrival: the vehicle asks to appear on `lane` at `requested_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRequest {
    pub lane: LaneId,
    pub requested_t: f64,
}

/// All requested arrivals in `[0, horizon)`, sorted by time (ties by lane).
pub fn generate_schedule(
    master_seed: u64,
    rates: &BTreeMap<LaneId, f64>,
    horizon: f64,
) -> Vec<ArrivalRequest> {
    let mut out = Vec::new();
    for (&lane, &rate) in rates {
        if rate <= 0.0 {
            continue;
        }
        let mut stream = LaneStream::new(master_seed, lane, rate);
        loop {
            let t = stream.next_request();
            if t >= horizon {
                break;
            }
            out.push(ArrivalRequest { lane, requested_t: t });
        }
    }
    out.sort_by(|a, b| {
        a.requested_t
            .partial_cmp(&b.requested_t)
            .expect("finite arrival times")
            .then(a.lane.cmp(&b.lane))
    });
    out
}

/// Injection speed: the largest admissible arrival velocity at the approach
/// start (speed limit capped by the stop-before-the-zone envelope).
pub fn arrival_speed(dt: f64, p: &PhysicalParams) -> f64 {
    safety::entry_prevention_cap_discrete(-p.approach, p.u_min, dt).min(p.v_max)
}

/// One admitted arrival, for the log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub id: VehicleId,
    pub lane: LaneId,
    pub requested_t: f64,
    pub admitted_t: f64,
}

impl ArrivalRecord {
    /// Gating delay, s (zero when the first eligible step admitted).
    pub fn delay(&self) -> f64 {
        self.admitted_t - self.requested_t
    }
}

/// Admission history: who was admitted when, and how long gating held them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArrivalLog {
    pub records: Vec<ArrivalRecord>,
}

impl ArrivalLog {
    /// Admitted vehicles per second on `lane` over `horizon` seconds.
    pub fn realized_rate(&self, lane: LaneId, horizon: f64) -> f64 {
        assert!(horizon > 0.0, "horizon must be positive");
        let n = self.records.iter().filter(|r| r.lane == lane).count();
        n as f64 / horizon
    }

    /// Realized rate for every lane in `lanes` (zero where nothing arrived).
    pub fn realized_rates(&self, lanes: &[LaneId], horizon: f64) -> BTreeMap<LaneId, f64> {
        lanes
            .iter()
            .map(|&l| (l, self.realized_rate(l, horizon)))
            .collect()
    }

    /// CSV with header `lane,requested_t,admitted_t,delay`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lane,requested_t,admitted_t,delay\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.lane,
                r.requested_t,
                r.admitted_t,
                r.delay()
            ));
        }
        s
    }
}

/// Requested arrivals not yet admitted, FIFO per lane.
#[derive(Clone, Debug, Default)]
pub struct PendingArrivals {
    queues: BTreeMap<LaneId, VecDeque<f64>>,
}

impl PendingArrivals {
    /// Queue every request of a pre-generated schedule (must be time-sorted,
    /// as [`generate_schedule`] returns).
    pub fn from_schedule(requests: &[ArrivalRequest]) -> Self {
        let mut q = PendingArrivals::default();
        for r in requests {
            q.push(r.lane, r.requested_t);
        }
        q
    }

    pub fn push(&mut self, lane: LaneId, requested_t: f64) {
        let q = self.queues.entry(lane).or_default();
        if let Some(&last) = q.back() {
            assert!(requested_t >= last, "requests must be pushed in time order");
        }
        q.push_back(requested_t);
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    /// Number of requests still waiting.
    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    /// Admit every due request whose gate passes at the simulation step
    /// `t_now`.
    ///
    /// `tails` holds each lane's rearmost live vehicle as `(x, v)`; it is
    /// updated in place as vehicles are admitted so that a second same-step
    /// request on the lane is gated against the first (and is therefore
    /// blocked at zero gap until the first moves on). A blocked head blocks
    /// its whole lane — admissions are first-come-first-served per lane.
    /// Vehicle ids are drawn from `next_id` in admission order.
    pub fn admit_due(
        &mut self,
        t_now: f64,
        dt: f64,
        tails: &mut BTreeMap<LaneId, (f64, f64)>,
        p: &PhysicalParams,
        next_id: &mut VehicleId,
        log: &mut ArrivalLog,
    ) -> Vec<VehicleState> {
        let v_in = arrival_speed(dt, p);
        let mut admitted = Vec::new();
        for (&lane, queue) in &mut self.queues {
            while let Some(&requested_t) = queue.front() {
                if requested_t > t_now + 1e-9 {
                    break;
                }
                let tail = tails.get(&lane).copied();
                if !safety::arrival_gate(v_in, tail, dt, p) {
                    break;
                }
                queue.pop_front();
                let id = *next_id;
                *next_id += 1;
                let state = VehicleState {
                    id,
                    lane,
                    x: -p.approach,
                    v: v_in,
                    u_prev: 0.0,
                    t_arrival: t_now,
                };
                tails.insert(lane, (state.x, state.v));
                log.records.push(ArrivalRecord {
                    id,
                    lane,
                    requested_t,
                    admitted_t: t_now,
                });
                admitted.push(state);
            }
        }
        admitted
    }
}
