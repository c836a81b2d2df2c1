//! Discrete-event simulation of a cache hierarchy.
//!
//! Requests, downloads and expiries follow the same per-object status rules
//! as the Markov model (`apply_request`, `complete_fetch`). On top of that
//! each cache has a finite store managed by one of the [`Policy`] variants.

mod policy;
mod report;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

pub use policy::{ttl_min_admit_evict, ttl_min_extnd_evict, Decision, Policy};
pub use report::{
    empirical_utility, empirical_utility_weighted, ObjectReport, RateSource, SimReport, LOW_CONFIDENCE_REQUESTS,
};

use crate::error::{Error, Result};
use crate::model::{apply_request, complete_fetch, CacheStatus, INFINITE_TTL_RATE, NEVER_CACHE_RATE};
use crate::objective::TtlConfig;
use crate::ph::PhaseDist;
use crate::tree::{CacheTree, ObjectDemand};
use policy::{time_key, ResidentSet};
use report::{binomial_se, ratio_batch_se};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    /// Draw TTLs from an exponential with the configured rate, as the model
    /// assumes. When off, every TTL is the mean `1/theta`.
    pub exponential_ttl: bool,
    /// Also restart the TTL of an ancestor that serves a hit.
    pub reset_on_ancestor_hit: bool,
    pub warmup_fraction: f64,
    pub batches: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            exponential_ttl: true,
            reset_on_ancestor_hit: false,
            warmup_fraction: 0.05,
            batches: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub time: f64,
    pub object: usize,
    /// Leaf index.
    pub leaf: usize,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub tree: CacheTree,
    pub demands: Vec<ObjectDemand>,
    pub policy: Policy,
    pub ttl: Option<TtlConfig>,
    /// Download delay into each cache; `None` is an instantaneous download.
    pub delays: Vec<Option<PhaseDist>>,
    /// Number of requests to simulate.
    pub horizon: u64,
    pub seed: u64,
    pub options: SimOptions,
    /// Replay these requests instead of sampling the demand processes.
    pub trace: Option<Vec<TraceRequest>>,
}

impl Scenario {
    /// Exponential download delays from the tree's fetch rates.
    pub fn new(
        tree: CacheTree,
        demands: Vec<ObjectDemand>,
        policy: Policy,
        ttl: Option<TtlConfig>,
        horizon: u64,
        seed: u64,
    ) -> Result<Self> {
        let delays = tree
            .nodes()
            .iter()
            .map(|n| PhaseDist::exponential(n.fetch_rate).map(Some))
            .collect::<Result<_>>()?;
        Ok(Self {
            tree,
            demands,
            policy,
            ttl,
            delays,
            horizon,
            seed,
            options: SimOptions::default(),
            trace: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("horizon must be at least one request"));
        }
        if self.demands.is_empty() {
            return Err(Error::param("scenario has no objects"));
        }
        for d in &self.demands {
            d.validate_for(&self.tree)?;
        }
        if self.delays.len() != self.tree.n_caches() {
            return Err(Error::param("one delay distribution per cache is required"));
        }
        if self.policy.uses_ttl() {
            let ttl = self
                .ttl
                .as_ref()
                .ok_or_else(|| Error::Config(format!("policy {} needs TTL values", self.policy)))?;
            if ttl.n_objects() != self.demands.len() || ttl.n_caches() != self.tree.n_caches() {
                return Err(Error::Config("TTL values do not match the scenario dimensions".into()));
            }
        }
        let o = &self.options;
        if !(0.0..1.0).contains(&o.warmup_fraction) || o.batches == 0 {
            return Err(Error::Config("simulation warmup_fraction must be in [0, 1) and batches >= 1".into()));
        }
        if let Some(tr) = &self.trace {
            let mut last = f64::NEG_INFINITY;
            for r in tr {
                if r.object >= self.demands.len() || r.leaf >= self.tree.n_leaves() || !(r.time >= last) {
                    return Err(Error::param("trace requests must be time-ordered and in range"));
                }
                last = r.time;
            }
            if tr.is_empty() {
                return Err(Error::param("trace is empty"));
            }
        }
        Ok(())
    }
}

const KIND_FETCH: u8 = 0;
const KIND_EXPIRE: u8 = 1;
const KIND_ARRIVE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    kind: u8,
    seq: u64,
    object: usize,
    /// Cache id, or leaf index for arrivals.
    at: usize,
    version: u32,
}

const STREAM_ARRIVAL: u64 = 1;
const STREAM_DELAY: u64 = 2;
const STREAM_TTL: u64 = 3;
const STREAM_EVICT: u64 = 4;

fn stream(seed: u64, kind: u64, object: usize, sub: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 60) | ((object as u64) << 20) | sub as u64);
    rng
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn event(&mut self, e: &Event) {
        self.bytes(&e.time.to_le_bytes());
        self.bytes(&[e.kind]);
        self.bytes(&(e.object as u64).to_le_bytes());
        self.bytes(&(e.at as u64).to_le_bytes());
    }
}

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a(data: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.bytes(data);
    h.0
}

struct Sim<'a> {
    s: &'a Scenario,
    n: usize,
    n_c: usize,
    n_l: usize,
    cap: Vec<usize>,
    status: Vec<Vec<CacheStatus>>,
    version: Vec<u32>,
    stores: Vec<ResidentSet>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    counter: u64,
    arrival_rng: Vec<Option<ChaCha8Rng>>,
    delay_rng: Vec<ChaCha8Rng>,
    ttl_rng: Vec<ChaCha8Rng>,
    evict_rng: Vec<ChaCha8Rng>,
    // statistics
    stats_on: bool,
    in_since: Vec<f64>,
    occ_acc: Vec<f64>,
    batch_start: f64,
    batch_req: Vec<Vec<u32>>,
    batch_hit: Vec<Vec<u32>>,
    batch_occ: Vec<Vec<f64>>,
    batch_dur: Vec<f64>,
    cur_req: Vec<u32>,
    cur_hit: Vec<u32>,
}

impl<'a> Sim<'a> {
    fn new(s: &'a Scenario) -> Self {
        let n = s.demands.len();
        let n_c = s.tree.n_caches();
        let n_l = s.tree.n_leaves();
        let cap = s
            .tree
            .nodes()
            .iter()
            .map(|c| {
                if s.policy == Policy::TtlPure {
                    usize::MAX
                } else {
                    c.capacity.floor() as usize
                }
            })
            .collect();
        let arrival_rng = (0..n * n_l)
            .map(|ij| {
                let (i, j) = (ij / n_l, ij % n_l);
                s.demands[i].stream(j).map(|_| stream(s.seed, STREAM_ARRIVAL, i, j))
            })
            .collect();
        let per_ik = |kind| -> Vec<ChaCha8Rng> {
            (0..n * n_c)
                .map(|ik| stream(s.seed, kind, ik / n_c, ik % n_c))
                .collect()
        };
        Self {
            s,
            n,
            n_c,
            n_l,
            cap,
            status: vec![vec![CacheStatus::Out; n_c]; n],
            version: vec![0; n * n_c],
            stores: (0..n_c).map(|_| ResidentSet::new(n)).collect(),
            heap: BinaryHeap::new(),
            seq: 0,
            counter: 0,
            arrival_rng,
            delay_rng: per_ik(STREAM_DELAY),
            ttl_rng: per_ik(STREAM_TTL),
            evict_rng: (0..n_c).map(|k| stream(s.seed, STREAM_EVICT, 0, k)).collect(),
            stats_on: false,
            in_since: vec![0.0; n * n_c],
            occ_acc: vec![0.0; n * n_c],
            batch_start: 0.0,
            batch_req: Vec::new(),
            batch_hit: Vec::new(),
            batch_occ: Vec::new(),
            batch_dur: Vec::new(),
            cur_req: vec![0; n * n_l],
            cur_hit: vec![0; n * n_l],
        }
    }

    fn push(&mut self, time: f64, kind: u8, object: usize, at: usize, version: u32) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time: time_key(time),
            kind,
            seq: self.seq,
            object,
            at,
            version,
        }));
    }

    fn schedule_arrival(&mut self, t: f64, i: usize, j: usize) {
        let d = self.s.demands[i].stream(j).expect("stream exists");
        let rng = self.arrival_rng[i * self.n_l + j].as_mut().expect("stream exists");
        let dt = d.sample(rng);
        self.push(t + dt, KIND_ARRIVE, i, j, 0);
    }

    fn schedule_fetch(&mut self, t: f64, i: usize, k: usize) {
        let dt = match &self.s.delays[k] {
            Some(d) => d.sample(&mut self.delay_rng[i * self.n_c + k]),
            None => 0.0,
        };
        self.push(t + dt, KIND_FETCH, i, k, 0);
    }

    fn ttl_rate(&self, i: usize, k: usize) -> f64 {
        self.s.ttl.as_ref().map_or(f64::NAN, |x| x.get(i, k))
    }

    /// Fresh TTL duration for object `i` at cache `k`.
    fn fresh_ttl(&mut self, i: usize, k: usize) -> f64 {
        let theta = self.ttl_rate(i, k);
        if theta <= INFINITE_TTL_RATE {
            f64::INFINITY
        } else if self.s.options.exponential_ttl {
            Exp::new(theta).expect("positive rate").sample(&mut self.ttl_rng[i * self.n_c + k])
        } else {
            1.0 / theta
        }
    }

    fn enter(&mut self, i: usize, k: usize, t: f64) {
        self.in_since[i * self.n_c + k] = t;
    }

    fn leave(&mut self, i: usize, k: usize, t: f64) {
        let ik = i * self.n_c + k;
        if self.stats_on {
            self.occ_acc[ik] += t - self.in_since[ik];
        }
        self.version[ik] = self.version[ik].wrapping_add(1);
    }

    fn flush(&mut self, t: f64) {
        for k in 0..self.n_c {
            for &i in self.stores[k].members() {
                let ik = i * self.n_c + k;
                self.occ_acc[ik] += t - self.in_since[ik];
                self.in_since[ik] = t;
            }
        }
    }

    fn start_stats(&mut self, t: f64) {
        self.stats_on = true;
        for k in 0..self.n_c {
            for &i in self.stores[k].members() {
                self.in_since[i * self.n_c + k] = t;
            }
        }
        self.occ_acc.iter_mut().for_each(|v| *v = 0.0);
        self.batch_start = t;
    }

    fn close_batch(&mut self, t: f64) {
        self.flush(t);
        self.batch_occ.push(std::mem::replace(&mut self.occ_acc, vec![0.0; self.n * self.n_c]));
        self.batch_req.push(std::mem::replace(&mut self.cur_req, vec![0; self.n * self.n_l]));
        self.batch_hit.push(std::mem::replace(&mut self.cur_hit, vec![0; self.n * self.n_l]));
        self.batch_dur.push(t - self.batch_start);
        self.batch_start = t;
    }

    fn evict(&mut self, victim: usize, k: usize, t: f64) {
        self.stores[k].remove(victim);
        self.status[victim][k] = CacheStatus::Out;
        self.leave(victim, k, t);
    }

    /// Restart the TTL (or recency) of a stored object after a hit.
    fn refresh(&mut self, i: usize, k: usize, t: f64) {
        match self.s.policy {
            Policy::TtlPure | Policy::TtlMin | Policy::TtlMinExtnd => {
                let tau = self.fresh_ttl(i, k);
                let ik = i * self.n_c + k;
                self.version[ik] = self.version[ik].wrapping_add(1);
                self.stores[k].rekey(i, time_key(t + tau));
                if self.s.policy != Policy::TtlMinExtnd && tau.is_finite() {
                    let v = self.version[ik];
                    self.push(t + tau, KIND_EXPIRE, i, k, v);
                }
            }
            Policy::Lru => {
                self.counter += 1;
                self.stores[k].rekey(i, self.counter);
            }
            Policy::Fifo | Policy::Random => {}
        }
    }

    /// A download into `k` finished and the object is now `In`; decide whether it stays.
    fn admit(&mut self, i: usize, k: usize, t: f64) {
        debug_assert!(!self.stores[k].contains(i), "object {i} fetched into cache {k} while resident");
        let full = self.stores[k].len() >= self.cap[k];
        let key = match self.s.policy {
            Policy::TtlPure | Policy::TtlMin | Policy::TtlMinExtnd => {
                if self.ttl_rate(i, k) >= NEVER_CACHE_RATE {
                    self.status[i][k] = CacheStatus::Out;
                    return;
                }
                let tau = self.fresh_ttl(i, k);
                if full {
                    let (kmin, victim) = self.stores[k].min().expect("full store");
                    if t + tau > f64::from_bits(kmin) {
                        self.evict(victim, k, t);
                    } else {
                        self.status[i][k] = CacheStatus::Out;
                        return;
                    }
                }
                if self.s.policy != Policy::TtlMinExtnd && tau.is_finite() {
                    let ik = i * self.n_c + k;
                    self.version[ik] = self.version[ik].wrapping_add(1);
                    let v = self.version[ik];
                    self.push(t + tau, KIND_EXPIRE, i, k, v);
                }
                time_key(t + tau)
            }
            Policy::Lru | Policy::Fifo => {
                if full {
                    let (_, victim) = self.stores[k].min().expect("full store");
                    self.evict(victim, k, t);
                }
                self.counter += 1;
                self.counter
            }
            Policy::Random => {
                if full {
                    let victim = self.stores[k].random(&mut self.evict_rng[k]).expect("full store");
                    self.evict(victim, k, t);
                }
                0
            }
        };
        self.stores[k].insert(i, key);
        self.enter(i, k, t);
        assert!(self.stores[k].len() <= self.cap[k], "cache {k} over capacity");
    }

    fn on_arrival(&mut self, i: usize, j: usize, t: f64, counted: bool) {
        let leaf = self.s.tree.leaves()[j];
        let out = apply_request(&self.s.tree, &mut self.status[i], leaf);
        if counted {
            self.cur_req[i * self.n_l + j] += 1;
            if out.hit {
                self.cur_hit[i * self.n_l + j] += 1;
            }
        }
        if let Some(sv) = out.serving {
            if sv == leaf || self.s.options.reset_on_ancestor_hit || matches!(self.s.policy, Policy::Lru) {
                self.refresh(i, sv, t);
            }
        }
        if let Some(f) = out.started_fetch {
            self.schedule_fetch(t, i, f);
        }
    }

    fn on_fetch(&mut self, i: usize, k: usize, t: f64) {
        let started = complete_fetch(&self.s.tree, &mut self.status[i], k);
        for c in started {
            self.schedule_fetch(t, i, c);
        }
        self.admit(i, k, t);
    }

    fn on_expire(&mut self, i: usize, k: usize, version: u32, t: f64) {
        let ik = i * self.n_c + k;
        if self.version[ik] == version && self.status[i][k] == CacheStatus::In {
            self.stores[k].remove(i);
            self.status[i][k] = CacheStatus::Out;
            self.leave(i, k, t);
        }
    }
}

pub fn simulate(s: &Scenario) -> Result<SimReport> {
    s.validate()?;
    let mut sim = Sim::new(s);
    let trace = s.trace.as_deref();
    let horizon = match trace {
        Some(tr) => s.horizon.min(tr.len() as u64),
        None => s.horizon,
    };
    let warmup = (horizon as f64 * s.options.warmup_fraction).floor() as u64;
    let measured = horizon - warmup;
    let n_batches = (s.options.batches as u64).min(measured).max(1);
    let batch_of = |r: u64| ((r - warmup) * n_batches / measured) as usize;

    match trace {
        Some(tr) => sim.push(tr[0].time, KIND_ARRIVE, tr[0].object, tr[0].leaf, 0),
        None => {
            for i in 0..sim.n {
                for j in 0..sim.n_l {
                    if s.demands[i].stream(j).is_some() {
                        sim.schedule_arrival(0.0, i, j);
                    }
                }
            }
        }
    }

    let mut hash = Fnv::new();
    let mut events = 0u64;
    let mut r = 0u64;
    let mut cur_batch = 0usize;
    let mut t_start = 0.0;
    let mut t_end = 0.0;
    while let Some(Reverse(ev)) = sim.heap.pop() {
        let t = f64::from_bits(ev.time);
        hash.event(&ev);
        events += 1;
        match ev.kind {
            KIND_FETCH => sim.on_fetch(ev.object, ev.at, t),
            KIND_EXPIRE => sim.on_expire(ev.object, ev.at, ev.version, t),
            _ => {
                if r == warmup {
                    sim.start_stats(t);
                    t_start = t;
                }
                let counted = r >= warmup;
                if counted {
                    let b = batch_of(r);
                    while cur_batch < b {
                        sim.close_batch(t);
                        cur_batch += 1;
                    }
                }
                sim.on_arrival(ev.object, ev.at, t, counted);
                r += 1;
                if r == horizon {
                    t_end = t;
                    break;
                }
                match trace {
                    Some(tr) => {
                        let nx = tr[r as usize];
                        sim.push(nx.time, KIND_ARRIVE, nx.object, nx.leaf, 0);
                    }
                    None => sim.schedule_arrival(t, ev.object, ev.at),
                }
            }
        }
    }
    sim.close_batch(t_end);
    Ok(build_report(&sim, horizon, warmup, measured, t_end - t_start, hash.0, events))
}

fn build_report(
    sim: &Sim,
    horizon: u64,
    warmup: u64,
    measured: u64,
    measured_time: f64,
    hash: u64,
    events: u64,
) -> SimReport {
    let (n, n_c, n_l) = (sim.n, sim.n_c, sim.n_l);
    let nb = sim.batch_req.len();
    let mut objects = Vec::with_capacity(n);
    let mut cache_occupancy = vec![0.0; n_c];
    let mut total_hits = 0u64;
    let mut total_req = 0u64;
    for i in 0..n {
        let mut requests = vec![0u64; n_l];
        let mut hits = vec![0u64; n_l];
        let mut hit_prob = vec![None; n_l];
        let mut hit_prob_se = vec![None; n_l];
        let mut sys_num = vec![0.0; nb];
        let mut sys_den = vec![0.0; nb];
        for j in 0..n_l {
            let ij = i * n_l + j;
            let num: Vec<f64> = sim.batch_hit.iter().map(|b| b[ij] as f64).collect();
            let den: Vec<f64> = sim.batch_req.iter().map(|b| b[ij] as f64).collect();
            requests[j] = den.iter().sum::<f64>() as u64;
            hits[j] = num.iter().sum::<f64>() as u64;
            for b in 0..nb {
                sys_num[b] += num[b];
                sys_den[b] += den[b];
            }
            if requests[j] > 0 {
                hit_prob[j] = Some(hits[j] as f64 / requests[j] as f64);
                hit_prob_se[j] = Some(binomial_se(hits[j], requests[j]).max(ratio_batch_se(&num, &den)));
            }
        }
        let sreq: u64 = requests.iter().sum();
        let shit: u64 = hits.iter().sum();
        total_req += sreq;
        total_hits += shit;
        let (system_hit, system_hit_se) = if sreq > 0 {
            (
                Some(shit as f64 / sreq as f64),
                Some(binomial_se(shit, sreq).max(ratio_batch_se(&sys_num, &sys_den))),
            )
        } else {
            (None, None)
        };
        let mut occupancy = vec![0.0; n_c];
        let mut occupancy_se = vec![0.0; n_c];
        for k in 0..n_c {
            let num: Vec<f64> = sim.batch_occ.iter().map(|b| b[i * n_c + k]).collect();
            let tot: f64 = num.iter().sum();
            occupancy[k] = if measured_time > 0.0 { tot / measured_time } else { 0.0 };
            occupancy_se[k] = ratio_batch_se(&num, &sim.batch_dur);
            cache_occupancy[k] += occupancy[k];
        }
        objects.push(ObjectReport {
            object: sim.s.demands[i].object,
            requests,
            hits,
            hit_prob,
            hit_prob_se,
            system_hit,
            system_hit_se,
            occupancy,
            occupancy_se,
            configured_rates: sim.s.demands[i].rates(),
        });
    }
    SimReport {
        policy: sim.s.policy,
        seed: sim.s.seed,
        horizon,
        warmup_requests: warmup,
        measured_requests: measured,
        measured_time,
        objects,
        cache_occupancy,
        offloading: if total_req > 0 {
            total_hits as f64 / total_req as f64
        } else {
            0.0
        },
        low_confidence: measured < LOW_CONFIDENCE_REQUESTS || nb < 2,
        event_hash: format!("{hash:016x}"),
        events,
    }
}
