use serde::{Deserialize, Serialize};

use super::policy::Policy;
use crate::error::Result;
use crate::utility::UtilitySpec;

/// Fewer measured requests than this marks a report as low confidence.
pub const LOW_CONFIDENCE_REQUESTS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub object: usize,
    /// Per leaf index.
    pub requests: Vec<u64>,
    pub hits: Vec<u64>,
    pub hit_prob: Vec<Option<f64>>,
    pub hit_prob_se: Vec<Option<f64>>,
    pub system_hit: Option<f64>,
    pub system_hit_se: Option<f64>,
    /// Time-average fraction of time the object is stored, per cache.
    pub occupancy: Vec<f64>,
    pub occupancy_se: Vec<f64>,
    pub configured_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub seed: u64,
    pub horizon: u64,
    pub warmup_requests: u64,
    pub measured_requests: u64,
    pub measured_time: f64,
    pub objects: Vec<ObjectReport>,
    /// Time-average number of stored objects per cache.
    pub cache_occupancy: Vec<f64>,
    /// Fraction of measured requests served by some cache.
    pub offloading: f64,
    pub low_confidence: bool,
    /// FNV-1a hash of the processed event sequence, hex.
    pub event_hash: String,
    pub events: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    Configured,
    Measured,
}

impl SimReport {
    pub fn measured_rate(&self, object: usize, leaf: usize) -> f64 {
        if self.measured_time > 0.0 {
            self.objects[object].requests[leaf] as f64 / self.measured_time
        } else {
            0.0
        }
    }

    fn rate(&self, object: usize, leaf: usize, src: RateSource) -> f64 {
        match src {
            RateSource::Configured => self.objects[object].configured_rates[leaf],
            RateSource::Measured => self.measured_rate(object, leaf),
        }
    }

    /// `sum_j lambda_ij psi(P_ij)` per object; streams without measured
    /// requests are skipped.
    pub fn object_utilities(&self, u: &UtilitySpec, src: RateSource) -> Result<Vec<f64>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let mut v = 0.0;
                for (j, p) in o.hit_prob.iter().enumerate() {
                    if let Some(p) = p {
                        v += self.rate(i, j, src) * u.value(*p)?;
                    }
                }
                Ok(v)
            })
            .collect()
    }
}

/// Aggregate `sum_i sum_j lambda_ij psi(P_ij)` over empirical hit probabilities.
pub fn empirical_utility(r: &SimReport, u: &UtilitySpec, src: RateSource) -> Result<f64> {
    Ok(r.object_utilities(u, src)?.iter().sum())
}

/// `sum_i w_i psi(P_i)` with per-object weights such as trace request counts.
pub fn empirical_utility_weighted(r: &SimReport, u: &UtilitySpec, weights: &[f64]) -> Result<f64> {
    let mut v = 0.0;
    for (o, &w) in r.objects.iter().zip(weights) {
        if let Some(p) = o.system_hit {
            v += w * u.value(p)?;
        }
    }
    Ok(v)
}

pub(crate) fn binomial_se(hits: u64, n: u64) -> f64 {
    let p = hits as f64 / n as f64;
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Standard error of `sum num / sum den` from batch totals.
pub(crate) fn ratio_batch_se(num: &[f64], den: &[f64]) -> f64 {
    let b = num.len();
    if b < 2 {
        return f64::INFINITY;
    }
    let tn: f64 = num.iter().sum();
    let td: f64 = den.iter().sum();
    if td <= 0.0 {
        return f64::INFINITY;
    }
    let ratio = tn / td;
    let mean_d = td / b as f64;
    let ss: f64 = num.iter().zip(den).map(|(n, d)| (n - ratio * d).powi(2)).sum();
    (ss / (b as f64 * (b as f64 - 1.0))).sqrt() / mean_d
}
