//! Line-delimited JSON evaluation protocol.
//!
//! Each request line carries a scenario config, a TTL assignment (rates, one
//! row per object, `null` for never cache), an optional single-cache
//! placement per object, a seed and a horizon. The reply is one JSON line
//! with per-object utilities and hit probabilities, or `{"error": ...}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::experiment::{scenario, simulated_object_utilities};
use crate::model::{INFINITE_TTL_RATE, NEVER_CACHE_RATE};
use crate::objective::TtlConfig;
use crate::sim::{simulate, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<serde_json::Value>,
    pub scenario: Config,
    /// `ttl_rates[object]` has one entry per cache, or a single entry used at every cache.
    pub ttl_rates: Vec<Vec<Option<f64>>>,
    /// Cache holding each object; other caches get the never-cache sentinel.
    #[serde(default)]
    pub placement: Option<Vec<Option<usize>>>,
    pub seed: u64,
    pub horizon: u64,
    /// Defaults to the scenario's simulation policy.
    #[serde(default)]
    pub policy: Option<Policy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<serde_json::Value>,
    pub utilities: Vec<f64>,
    /// `hit_prob[object][leaf]`, `null` for leaves without measured requests.
    pub hit_prob: Vec<Vec<Option<f64>>>,
    pub system_hit: Vec<Option<f64>>,
    pub aggregate: f64,
    pub offloading: f64,
    pub low_confidence: bool,
    pub event_hash: String,
}

#[derive(Clone, Debug, Serialize)]
struct ErrorReply<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a serde_json::Value>,
    error: String,
}

pub fn ttl_assignment(req: &EvalRequest, n_objects: usize, n_caches: usize) -> Result<TtlConfig> {
    if req.ttl_rates.len() != n_objects {
        return Err(Error::param(format!(
            "ttl_rates has {} rows for {n_objects} objects",
            req.ttl_rates.len()
        )));
    }
    if let Some(pl) = &req.placement {
        if pl.len() != n_objects {
            return Err(Error::param(format!("placement has {} entries for {n_objects} objects", pl.len())));
        }
    }
    let mut x = Vec::with_capacity(n_objects * n_caches);
    for (i, row) in req.ttl_rates.iter().enumerate() {
        if row.len() != n_caches && row.len() != 1 {
            return Err(Error::param(format!("ttl_rates[{i}] needs 1 or {n_caches} entries")));
        }
        let place = req.placement.as_ref().and_then(|p| p[i]);
        if let Some(v) = place {
            if v >= n_caches {
                return Err(Error::param(format!("placement[{i}] = {v} is not a cache")));
            }
        }
        for k in 0..n_caches {
            let v = row[if row.len() == 1 { 0 } else { k }];
            let rate = match (place, v) {
                (Some(p), _) if p != k => NEVER_CACHE_RATE,
                (_, None) => NEVER_CACHE_RATE,
                (_, Some(r)) if r >= 0.0 => r.clamp(INFINITE_TTL_RATE, NEVER_CACHE_RATE),
                (_, Some(r)) => return Err(Error::param(format!("ttl_rates[{i}] has negative rate {r}"))),
            };
            x.push(rate);
        }
    }
    TtlConfig::new(n_objects, n_caches, x)
}

pub fn evaluate_request(req: &EvalRequest) -> Result<EvalReply> {
    let p = req.scenario.prepare(None)?;
    let inst = &p.instance;
    let x = ttl_assignment(req, inst.n_objects(), inst.n_caches())?;
    let policy = req.policy.unwrap_or(req.scenario.simulation.policy);
    if req.horizon == 0 {
        return Err(Error::param("horizon must be at least 1"));
    }
    let s = scenario(inst, policy, Some(x), &req.scenario.simulation, req.seed, req.horizon)?;
    let rep = simulate(&s)?;
    let utilities = simulated_object_utilities(inst, &rep, req.scenario.simulation.rate_source)?;
    Ok(EvalReply {
        id: req.id.clone(),
        aggregate: utilities.iter().sum(),
        utilities,
        hit_prob: rep.objects.iter().map(|o| o.hit_prob.clone()).collect(),
        system_hit: rep.objects.iter().map(|o| o.system_hit).collect(),
        offloading: rep.offloading,
        low_confidence: rep.low_confidence,
        event_hash: rep.event_hash,
    })
}

/// Reply to one request line.
pub fn handle_line(line: &str) -> String {
    let parsed: std::result::Result<EvalRequest, _> = serde_json::from_str(line);
    let out = match parsed {
        Err(e) => serde_json::to_string(&ErrorReply {
            id: None,
            error: format!("malformed request: {e}"),
        }),
        Ok(req) => match req.scenario.validate().and_then(|_| evaluate_request(&req)) {
            Ok(rep) => serde_json::to_string(&rep),
            Err(e) => serde_json::to_string(&ErrorReply {
                id: req.id.as_ref(),
                error: e.to_string(),
            }),
        },
    };
    out.expect("reply serializes")
}

/// Serve requests until end of input. Blank lines are skipped.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_line(&line))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(ttl: &str) -> String {
        format!(
            r#"{{"scenario": {{"tree": {{"shape": "binary", "capacity": 2}},
                "workload": {{"kind": "zipf", "n_objects": 4}}}},
               "ttl_rates": {ttl}, "seed": 3, "horizon": 4000, "policy": "ttl_min"}}"#
        )
        .replace('\n', " ")
    }

    #[test]
    fn never_cache_gives_floor_utilities() {
        let reply: EvalReply =
            serde_json::from_str(&handle_line(&request("[[null], [null], [null], [null]]"))).unwrap();
        assert_eq!(reply.utilities.len(), 4);
        assert!(reply.system_hit.iter().all(|p| *p == Some(0.0)));
        let floor = crate::utility::UtilitySpec::proportional().log_floor();
        for (i, u) in reply.utilities.iter().enumerate() {
            let lam = 2.0 * crate::workload::zipf_rate(i + 1, 0.8);
            assert!((u - lam * floor).abs() < 1e-9, "{u}");
        }
    }

    #[test]
    fn placement_masks_other_caches() {
        let mut req: EvalRequest = serde_json::from_str(&request("[[1.0], [1.0], [1.0], [1.0]]")).unwrap();
        req.placement = Some(vec![Some(0), None, Some(2), None]);
        let x = ttl_assignment(&req, 4, 3).unwrap();
        assert_eq!(x.object(0), &[1.0, NEVER_CACHE_RATE, NEVER_CACHE_RATE]);
        assert_eq!(x.object(1), &[1.0, 1.0, 1.0]);
        assert_eq!(x.object(2), &[NEVER_CACHE_RATE, NEVER_CACHE_RATE, 1.0]);
    }

    #[test]
    fn malformed_lines_get_error_replies() {
        let mut out = Vec::new();
        let input = format!("not json\n\n{}\n{{\"scenario\": 1}}\n", request("[[1.0]]"));
        serve(input.as_bytes(), &mut out).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.get("error").is_some()));
    }

    #[test]
    fn replies_are_reproducible() {
        let line = request("[[0.5], [0.5], [0.5], [0.5]]");
        assert_eq!(handle_line(&line), handle_line(&line));
        assert!(!handle_line(&line).contains("error"));
    }
}
