//! Exact per-object Markov arrival process of a TTL cache tree with fetch delays.
//!
//! The state of one object is the status of every cache (out, pending,
//! fetching, in) plus the phase of each leaf's request process. The generator
//! is built by breadth-first closure from the all-out state. Hidden
//! transitions go to `D0`; requests that miss the whole leaf-to-root path go
//! to `D1` and to the per-leaf miss matrix of the requesting leaf.
//!
//! The request/fetch rules live in [`apply_request`] and [`complete_fetch`]
//! and are shared with the simulator, so both see the same fetch-through
//! semantics.

use std::collections::HashMap;
use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tree::{CacheId, CacheTree, ObjectDemand};

/// TTL rates at or above this value mean "never cache here".
pub const NEVER_CACHE_RATE: f64 = 1e9;
/// TTL rates at or below this value mean "never expire".
pub const INFINITE_TTL_RATE: f64 = 1e-9;
pub const DEFAULT_STATE_CAP: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CacheStatus {
    Out = 0,
    /// Waiting for the parent to finish its own fetch.
    Pending = 1,
    Fetching = 2,
    In = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequestOutcome {
    pub hit: bool,
    /// Lowest cache on the path holding the object, if any.
    pub serving: Option<CacheId>,
    /// Cache that started a download because of this request.
    pub started_fetch: Option<CacheId>,
    pub changed: bool,
}

/// Apply a request arriving at `leaf` to the per-cache statuses.
///
/// The request is a hit if any cache on the path is `In`. All `Out` caches
/// below the first non-`Out` cache on the path join the download: the one
/// directly under an `In` cache starts fetching, the rest wait as `Pending`.
/// With nothing on the path the root fetches from the server.
pub fn apply_request(tree: &CacheTree, status: &mut [CacheStatus], leaf: CacheId) -> RequestOutcome {
    let path = tree.path_to_root(leaf);
    let serving = path.iter().copied().find(|&c| status[c] == CacheStatus::In);
    let hit = serving.is_some();
    if serving == Some(leaf) {
        return RequestOutcome {
            hit,
            serving,
            started_fetch: None,
            changed: false,
        };
    }
    let stop = path.iter().position(|&c| status[c] != CacheStatus::Out);
    let (n_out, fetcher) = match stop {
        Some(idx) if status[path[idx]] == CacheStatus::In => (idx, Some(path[idx - 1])),
        Some(idx) => (idx, None),
        None => (path.len(), Some(path[path.len() - 1])),
    };
    for &c in &path[..n_out] {
        status[c] = CacheStatus::Pending;
    }
    if let Some(f) = fetcher {
        status[f] = CacheStatus::Fetching;
    }
    RequestOutcome {
        hit,
        serving,
        started_fetch: fetcher,
        changed: n_out > 0,
    }
}

/// Finish the download at `cache`: it becomes `In` and its pending children
/// start fetching from it. Returns the children that started.
pub fn complete_fetch(tree: &CacheTree, status: &mut [CacheStatus], cache: CacheId) -> Vec<CacheId> {
    debug_assert_eq!(status[cache], CacheStatus::Fetching);
    status[cache] = CacheStatus::In;
    let mut started = Vec::new();
    for &child in tree.children(cache) {
        if status[child] == CacheStatus::Pending {
            status[child] = CacheStatus::Fetching;
            started.push(child);
        }
    }
    started
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelState {
    pub status: Vec<CacheStatus>,
    /// Phase of each leaf's request process (always 0 for Poisson streams).
    pub phase: Vec<u8>,
}

/// Square matrix in coordinate form; duplicate entries add up.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, v: f64) {
        self.entries.push((row, col, v));
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for &(r, _, v) in &self.entries {
            sums[r] += v;
        }
        sums
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .iter()
            .filter(|&&(r, c, _)| r == row && c == col)
            .map(|&(_, _, v)| v)
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// Row vector times matrix.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(r, c, x) in &self.entries {
            out[c] += v[r] * x;
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOptions {
    pub state_cap: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectMarkovModel {
    pub object: usize,
    pub states: Vec<ModelState>,
    pub d0: SparseMatrix,
    pub d1: SparseMatrix,
    /// Per leaf index; these sum to `d1`.
    pub leaf_miss: Vec<SparseMatrix>,
    /// Per cache, indices of states where the cache holds the object.
    pub chi: Vec<Vec<usize>>,
    /// Effective TTL rate per cache used in the generator.
    pub ttl_rates: Vec<f64>,
    pub leaf_rates: Vec<f64>,
    /// Per cache, unit-rate expiry transitions `(from, to)`; the generator is
    /// affine in each TTL rate with this pattern as slope.
    expiry: Vec<Vec<(usize, usize)>>,
    /// TTL rate clamped at the never-cache sentinel, derivative is zero.
    clamped: Vec<bool>,
    leaf_miss_rates: Vec<Vec<f64>>,
}

impl ObjectMarkovModel {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_caches(&self) -> usize {
        self.chi.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_miss.len()
    }

    /// `D_j 1`: miss rate out of each state caused by leaf `j`.
    pub fn leaf_miss_rates(&self, leaf: usize) -> &[f64] {
        &self.leaf_miss_rates[leaf]
    }

    pub fn expiry_pattern(&self, cache: CacheId) -> &[(usize, usize)] {
        if self.clamped[cache] {
            &[]
        } else {
            &self.expiry[cache]
        }
    }

    /// Dense `D0 + D1`.
    pub fn generator(&self) -> DMatrix<f64> {
        let mut q = self.d0.to_dense();
        for &(r, c, v) in &self.d1.entries {
            q[(r, c)] += v;
        }
        q
    }
}

/// Clamp a TTL rate to the range the generator handles.
pub fn effective_ttl_rate(rate: f64) -> Result<f64> {
    if rate.is_nan() || rate < 0.0 {
        return Err(Error::param(format!("TTL rate must be non-negative, got {rate}")));
    }
    Ok(rate.min(NEVER_CACHE_RATE))
}

pub fn build_object_model(
    tree: &CacheTree,
    demand: &ObjectDemand,
    ttl_rates: &[f64],
) -> Result<ObjectMarkovModel> {
    build_object_model_with(tree, demand, ttl_rates, ModelOptions::default())
}

enum Kind {
    Hidden,
    Miss(usize),
    Expiry(usize),
}

pub fn build_object_model_with(
    tree: &CacheTree,
    demand: &ObjectDemand,
    ttl_rates: &[f64],
    opts: ModelOptions,
) -> Result<ObjectMarkovModel> {
    demand.validate_for(tree)?;
    let n_c = tree.n_caches();
    let n_l = tree.n_leaves();
    if ttl_rates.len() != n_c {
        return Err(Error::param(format!(
            "expected {n_c} TTL rates, got {}",
            ttl_rates.len()
        )));
    }
    if n_c > 1 && !demand.all_exponential() {
        return Err(Error::param(
            "phase-type request processes are only supported for a single cache",
        ));
    }
    let theta = ttl_rates
        .iter()
        .map(|&r| effective_ttl_rate(r))
        .collect::<Result<Vec<_>>>()?;
    let clamped: Vec<bool> = ttl_rates.iter().map(|&r| r >= NEVER_CACHE_RATE).collect();
    let leaves = tree.leaves().to_vec();

    let mut start_phase = vec![0u8; n_l];
    for (j, p) in start_phase.iter_mut().enumerate() {
        if let Some(d) = demand.stream(j) {
            *p = d.init().iter().position(|&a| a > 0.0).unwrap_or(0) as u8;
        }
    }
    let start = ModelState {
        status: vec![CacheStatus::Out; n_c],
        phase: start_phase,
    };

    let mut index: HashMap<ModelState, usize> = HashMap::new();
    let mut states = vec![start.clone()];
    index.insert(start, 0);
    let mut queue = VecDeque::from([0usize]);
    let mut transitions: Vec<(usize, usize, f64, Kind)> = Vec::new();

    let mut intern = |st: ModelState,
                      states: &mut Vec<ModelState>,
                      queue: &mut VecDeque<usize>|
     -> Result<usize> {
        if let Some(&i) = index.get(&st) {
            return Ok(i);
        }
        let i = states.len();
        if i >= opts.state_cap {
            return Err(Error::Capacity {
                object: demand.object,
                cap: opts.state_cap,
            });
        }
        index.insert(st.clone(), i);
        states.push(st);
        queue.push_back(i);
        Ok(i)
    };

    while let Some(s) = queue.pop_front() {
        let cur = states[s].clone();

        for (j, &leaf) in leaves.iter().enumerate() {
            let Some(d) = demand.stream(j) else { continue };
            let p = cur.phase[j] as usize;
            for q in 0..d.phases() {
                let r = if q == p { 0.0 } else { d.subgen(p, q) };
                if r > 0.0 {
                    let mut next = cur.clone();
                    next.phase[j] = q as u8;
                    let t = intern(next, &mut states, &mut queue)?;
                    transitions.push((s, t, r, Kind::Hidden));
                }
            }
            let exit = d.exit_rate(p);
            if exit <= 0.0 {
                continue;
            }
            let mut status = cur.status.clone();
            let outcome = apply_request(tree, &mut status, leaf);
            for (q, &a) in d.init().iter().enumerate() {
                if a <= 0.0 {
                    continue;
                }
                let next = ModelState {
                    status: status.clone(),
                    phase: {
                        let mut ph = cur.phase.clone();
                        ph[j] = q as u8;
                        ph
                    },
                };
                let t = intern(next, &mut states, &mut queue)?;
                let rate = exit * a;
                if !outcome.hit {
                    transitions.push((s, t, rate, Kind::Miss(j)));
                } else if t != s {
                    transitions.push((s, t, rate, Kind::Hidden));
                }
            }
        }

        for k in 0..n_c {
            match cur.status[k] {
                CacheStatus::Fetching => {
                    let mut status = cur.status.clone();
                    complete_fetch(tree, &mut status, k);
                    let t = intern(
                        ModelState {
                            status,
                            phase: cur.phase.clone(),
                        },
                        &mut states,
                        &mut queue,
                    )?;
                    transitions.push((s, t, tree.fetch_rate(k), Kind::Hidden));
                }
                CacheStatus::In if theta[k] > 0.0 => {
                    let mut status = cur.status.clone();
                    status[k] = CacheStatus::Out;
                    let t = intern(
                        ModelState {
                            status,
                            phase: cur.phase.clone(),
                        },
                        &mut states,
                        &mut queue,
                    )?;
                    transitions.push((s, t, theta[k], Kind::Expiry(k)));
                }
                _ => {}
            }
        }
    }

    let n = states.len();
    let mut d0 = SparseMatrix::new(n);
    let mut d1 = SparseMatrix::new(n);
    let mut leaf_miss: Vec<SparseMatrix> = (0..n_l).map(|_| SparseMatrix::new(n)).collect();
    let mut expiry = vec![Vec::new(); n_c];
    let mut out_rate = vec![0.0; n];
    for (s, t, r, kind) in transitions {
        out_rate[s] += r;
        match kind {
            Kind::Hidden => d0.push(s, t, r),
            Kind::Expiry(k) => {
                d0.push(s, t, r);
                expiry[k].push((s, t));
            }
            Kind::Miss(j) => {
                d1.push(s, t, r);
                leaf_miss[j].push(s, t, r);
            }
        }
    }
    for (s, &r) in out_rate.iter().enumerate() {
        d0.push(s, s, -r);
    }
    let chi = (0..n_c)
        .map(|k| {
            (0..n)
                .filter(|&s| states[s].status[k] == CacheStatus::In)
                .collect()
        })
        .collect();
    let leaf_miss_rates = leaf_miss.iter().map(SparseMatrix::row_sums).collect();
    Ok(ObjectMarkovModel {
        object: demand.object,
        states,
        d0,
        d1,
        leaf_miss,
        chi,
        ttl_rates: theta,
        leaf_rates: demand.rates(),
        expiry,
        clamped,
        leaf_miss_rates,
    })
}
