//! Finite-capacity replacement rules.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// TTL caches with unbounded storage.
    TtlPure,
    /// Evict the resident with the smallest remaining TTL; expired objects leave.
    TtlMin,
    /// Like `TtlMin` but expired objects stay until evicted.
    TtlMinExtnd,
    Lru,
    Fifo,
    Random,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::TtlPure,
        Policy::TtlMin,
        Policy::TtlMinExtnd,
        Policy::Lru,
        Policy::Fifo,
        Policy::Random,
    ];

    pub fn uses_ttl(self) -> bool {
        matches!(self, Policy::TtlPure | Policy::TtlMin | Policy::TtlMinExtnd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::TtlPure => "ttl_pure",
            Policy::TtlMin => "ttl_min",
            Policy::TtlMinExtnd => "ttl_min_extnd",
            Policy::Lru => "lru",
            Policy::Fifo => "fifo",
            Policy::Random => "random",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ','], "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Admit { evict: Option<usize> },
    Reject,
}

/// Admission for a full TTL_min cache. `residents` holds `(object, remaining TTL)`.
///
/// The resident with the smallest remaining TTL (smaller id on ties) is
/// evicted when the fresh TTL is strictly larger; otherwise the newcomer is
/// turned away.
pub fn ttl_min_admit_evict(residents: &[(usize, f64)], fresh_ttl: f64) -> Decision {
    match min_resident(residents) {
        None => Decision::Admit { evict: None },
        Some((obj, rem)) if fresh_ttl > rem => Decision::Admit { evict: Some(obj) },
        Some(_) => Decision::Reject,
    }
}

/// Eviction for a full TTL_min,extnd cache. `residents` holds
/// `(object, tau(t))` where `tau` may be negative for expired objects.
///
/// The incoming object competes with its fresh TTL and loses ties.
pub fn ttl_min_extnd_evict(residents: &[(usize, f64)], _incoming: usize, fresh_ttl: f64) -> Decision {
    match min_resident(residents) {
        None => Decision::Admit { evict: None },
        Some((obj, tau)) if fresh_ttl > tau => Decision::Admit { evict: Some(obj) },
        Some(_) => Decision::Reject,
    }
}

fn min_resident(residents: &[(usize, f64)]) -> Option<(usize, f64)> {
    residents
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Order-preserving key for non-negative times; infinity sorts last.
pub(crate) fn time_key(t: f64) -> u64 {
    debug_assert!(t >= 0.0);
    t.to_bits()
}

/// Residents of one cache, ordered by a policy key.
#[derive(Clone, Debug)]
pub(crate) struct ResidentSet {
    ordered: BTreeSet<(u64, usize)>,
    key: Vec<u64>,
    /// For uniform random eviction.
    list: Vec<usize>,
    pos: Vec<usize>,
    present: Vec<bool>,
}

impl ResidentSet {
    pub fn new(n_objects: usize) -> Self {
        Self {
            ordered: BTreeSet::new(),
            key: vec![0; n_objects],
            list: Vec::new(),
            pos: vec![usize::MAX; n_objects],
            present: vec![false; n_objects],
        }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn contains(&self, obj: usize) -> bool {
        self.present[obj]
    }

    pub fn insert(&mut self, obj: usize, key: u64) {
        debug_assert!(!self.present[obj]);
        self.present[obj] = true;
        self.key[obj] = key;
        self.ordered.insert((key, obj));
        self.pos[obj] = self.list.len();
        self.list.push(obj);
    }

    pub fn remove(&mut self, obj: usize) {
        if !self.present[obj] {
            return;
        }
        self.present[obj] = false;
        self.ordered.remove(&(self.key[obj], obj));
        let p = self.pos[obj];
        self.list.swap_remove(p);
        if p < self.list.len() {
            self.pos[self.list[p]] = p;
        }
        self.pos[obj] = usize::MAX;
    }

    pub fn rekey(&mut self, obj: usize, key: u64) {
        if self.present[obj] {
            self.ordered.remove(&(self.key[obj], obj));
            self.key[obj] = key;
            self.ordered.insert((key, obj));
        }
    }

    /// Smallest key, smaller object id on ties.
    pub fn min(&self) -> Option<(u64, usize)> {
        self.ordered.first().copied()
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if self.list.is_empty() {
            None
        } else {
            Some(self.list[rng.random_range(0..self.list.len())])
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.list
    }
}
