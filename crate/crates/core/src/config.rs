//! Scenario file shared by the optimizer, the simulator and the eval server.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ProblemInstance;
use crate::ph::PhaseDist;
use crate::sim::{fnv1a, Policy, RateSource, SimOptions};
use crate::solver::SolverOptions;
use crate::tree::{CacheNode, CacheTree, ObjectDemand};
use crate::utility::UtilitySpec;
use crate::workload::{ingest_trace, zipf_rates, TraceWorkload, ZipfSpec};

pub const DEFAULT_RHO_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub tree: TreeConfig,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub utility: UtilitySpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeShape {
    Single,
    Binary,
    TwoLevel,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub shape: TreeShape,
    /// Per-cache capacity for the generated shapes.
    #[serde(default)]
    pub capacity: Option<f64>,
    /// Total cache count of a two-level tree (root plus leaves).
    #[serde(default)]
    pub n_caches: Option<usize>,
    #[serde(default)]
    pub fetch_rate: Option<f64>,
    /// Sets every fetch rate to `lambda_hot / delay_ratio`; overrides `fetch_rate`.
    #[serde(default)]
    pub delay_ratio: Option<f64>,
    #[serde(default)]
    pub nodes: Option<Vec<CacheNode>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadConfig {
    Zipf {
        n_objects: usize,
        #[serde(default = "default_s")]
        s: f64,
        #[serde(default = "default_true")]
        homogeneous: bool,
        #[serde(default)]
        seed: u64,
        /// Erlang order of the request processes; 1 is Poisson.
        #[serde(default = "default_order")]
        erlang_k: usize,
    },
    /// Explicit Poisson rates, `rates[object][leaf]`.
    Rates { rates: Vec<Vec<f64>> },
    Trace {
        path: PathBuf,
        #[serde(default = "default_min_requests")]
        min_requests: u64,
        /// Weight objects by trace request counts instead of rates.
        #[serde(default = "default_true")]
        request_count_weights: bool,
    },
}

fn default_s() -> f64 {
    0.8
}
fn default_true() -> bool {
    true
}
fn default_order() -> usize {
    1
}
fn default_min_requests() -> u64 {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub policy: Policy,
    pub horizon: u64,
    pub seed: u64,
    pub exponential_ttl: bool,
    pub reset_on_ancestor_hit: bool,
    pub warmup_fraction: f64,
    pub batches: usize,
    pub rate_source: RateSource,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let o = SimOptions::default();
        Self {
            policy: Policy::TtlMinExtnd,
            horizon: 500_000,
            seed: 1,
            exponential_ttl: o.exponential_ttl,
            reset_on_ancestor_hit: o.reset_on_ancestor_hit,
            warmup_fraction: o.warmup_fraction,
            batches: o.batches,
            rate_source: RateSource::Configured,
        }
    }
}

impl SimulationConfig {
    pub fn options(&self) -> SimOptions {
        SimOptions {
            exponential_ttl: self.exponential_ttl,
            reset_on_ancestor_hit: self.reset_on_ancestor_hit,
            warmup_fraction: self.warmup_fraction,
            batches: self.batches,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rho_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
        }
    }
}

/// Where a compared hierarchy gets its TTLs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtlSource {
    None,
    OptDelay,
    OptIdeal,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub label: String,
    pub policy: Policy,
    #[serde(default = "default_source")]
    pub ttl: TtlSource,
}

fn default_source() -> TtlSource {
    TtlSource::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub entries: Vec<CompareEntry>,
}

impl Default for CompareConfig {
    /// Optimal hierarchies with and without delay awareness against the classic policies.
    fn default() -> Self {
        let e = |label: &str, policy, ttl| CompareEntry {
            label: label.into(),
            policy,
            ttl,
        };
        Self {
            entries: vec![
                e("OPT|delay", Policy::TtlMinExtnd, TtlSource::OptDelay),
                e("OPT|ideal", Policy::TtlMinExtnd, TtlSource::OptIdeal),
                e("LRU", Policy::Lru, TtlSource::None),
                e("FIFO", Policy::Fifo, TtlSource::None),
                e("RANDOM", Policy::Random, TtlSource::None),
            ],
        }
    }
}

/// Problem instance built from a config, with object labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub instance: ProblemInstance,
    /// External id per object (index for synthetic workloads, trace id otherwise).
    pub labels: Vec<String>,
    /// Largest per-leaf request rate.
    pub lambda_hot: f64,
    pub trace: Option<TraceWorkload>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config =
            serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = cfg;
        if let WorkloadConfig::Trace { path: tp, .. } = &mut cfg.workload {
            if tp.is_relative() {
                if let Some(dir) = path.parent() {
                    *tp = dir.join(&*tp);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.utility.validate().map_err(|e| Error::Config(format!("utility: {e}")))?;
        let t = &self.tree;
        match t.shape {
            TreeShape::Explicit => {
                if t.nodes.is_none() {
                    return Err(Error::Config("tree.nodes is required for an explicit tree".into()));
                }
            }
            _ => {
                if t.capacity.is_none() {
                    return Err(Error::Config("tree.capacity is required".into()));
                }
                if t.shape == TreeShape::TwoLevel && t.n_caches.is_none() {
                    return Err(Error::Config("tree.n_caches is required for a two-level tree".into()));
                }
            }
        }
        if let Some(r) = t.delay_ratio {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config("tree.delay_ratio must be positive".into()));
            }
        }
        check_grid(&self.sweep.rho_grid).map_err(|_| Error::Config("sweep.rho_grid must be positive".into()))?;
        let s = &self.simulation;
        if s.horizon == 0 {
            return Err(Error::Config("simulation.horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&s.warmup_fraction) || s.batches == 0 {
            return Err(Error::Config(
                "simulation.warmup_fraction must be in [0, 1) and simulation.batches >= 1".into(),
            ));
        }
        if let WorkloadConfig::Zipf { n_objects, s, erlang_k, .. } = &self.workload {
            if *n_objects == 0 || !(*s >= 0.0) || *erlang_k == 0 {
                return Err(Error::Config(
                    "workload: n_objects and erlang_k must be >= 1 and s >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical hash of the parsed config, hex.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", fnv1a(&canon))
    }

    pub fn compare_entries(&self) -> CompareConfig {
        self.compare.clone().unwrap_or_default()
    }

    /// Build the problem instance, optionally overriding the delay ratio.
    pub fn prepare(&self, delay_ratio: Option<f64>) -> Result<Prepared> {
        let topo = self.topology(1.0)?;
        let n_leaves = topo.n_leaves();
        let (demands, labels, trace) = self.demands(n_leaves)?;
        let lambda_hot = demands
            .iter()
            .flat_map(|d| d.rates())
            .fold(0.0, f64::max);
        let ratio = delay_ratio.or(self.tree.delay_ratio);
        let tree = match ratio {
            Some(r) => {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Config(format!("delay ratio {r} must be positive")));
                }
                topo.with_fetch_rate(lambda_hot / r)?
            }
            None => self.topology(self.tree.fetch_rate.unwrap_or(1.0))?,
        };
        let mut inst = ProblemInstance::new(tree, demands, self.utility)?;
        if let (Some(tw), WorkloadConfig::Trace { request_count_weights: true, .. }) = (&trace, &self.workload) {
            inst = inst.with_request_counts(tw.weights())?;
        }
        Ok(Prepared {
            instance: inst,
            labels,
            lambda_hot,
            trace,
        })
    }

    fn topology(&self, default_fetch: f64) -> Result<CacheTree> {
        let t = &self.tree;
        let cap = t.capacity.unwrap_or(1.0);
        let tree = match t.shape {
            TreeShape::Single => CacheTree::single(cap, default_fetch),
            TreeShape::Binary => CacheTree::binary(cap, default_fetch),
            TreeShape::TwoLevel => CacheTree::two_level(t.n_caches.unwrap_or(1), cap, default_fetch),
            TreeShape::Explicit => {
                let mut nodes = t.nodes.clone().unwrap_or_default();
                if let Some(f) = t.fetch_rate {
                    nodes.iter_mut().for_each(|n| n.fetch_rate = f);
                }
                CacheTree::new(nodes)
            }
        };
        tree.map_err(|e| Error::Config(format!("tree: {e}")))
    }

    fn demands(&self, n_leaves: usize) -> Result<(Vec<ObjectDemand>, Vec<String>, Option<TraceWorkload>)> {
        match &self.workload {
            WorkloadConfig::Zipf {
                n_objects,
                s,
                homogeneous,
                seed,
                erlang_k,
            } => {
                let spec = ZipfSpec {
                    n_objects: *n_objects,
                    s: *s,
                    n_leaves,
                    homogeneous: *homogeneous,
                    seed: *seed,
                };
                let rates = zipf_rates(&spec)?;
                let demands = rates
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let streams = r
                            .iter()
                            .map(|&l| PhaseDist::erlang(*erlang_k, l * *erlang_k as f64).map(Some))
                            .collect::<Result<Vec<_>>>()?;
                        ObjectDemand::new(i, streams)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((demands, (0..*n_objects).map(|i| i.to_string()).collect(), None))
            }
            WorkloadConfig::Rates { rates } => {
                if rates.is_empty() {
                    return Err(Error::Config("workload.rates is empty".into()));
                }
                let demands = rates
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        if r.len() != n_leaves {
                            return Err(Error::Config(format!(
                                "workload.rates[{i}] has {} entries for {n_leaves} leaves",
                                r.len()
                            )));
                        }
                        ObjectDemand::poisson(i, r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((demands, (0..rates.len()).map(|i| i.to_string()).collect(), None))
            }
            WorkloadConfig::Trace { path, min_requests, .. } => {
                let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let tw = ingest_trace(BufReader::new(f), *min_requests)?;
                if tw.objects.is_empty() {
                    return Err(Error::param("no trace object reaches the minimum request count"));
                }
                if tw.n_leaves > n_leaves {
                    return Err(Error::Config(format!(
                        "trace uses leaf {} but the tree has {n_leaves} leaves",
                        tw.n_leaves - 1
                    )));
                }
                let demands = tw
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let mut r = o.leaf_rates();
                        r.resize(n_leaves, 0.0);
                        ObjectDemand::poisson(i, &r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels = tw.objects.iter().map(|o| o.id.clone()).collect();
                Ok((demands, labels, Some(tw)))
            }
        }
    }
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param("delay-ratio grid is empty"));
    }
    if grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::param("delay ratios must be positive and finite"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"{
        "tree": {"shape": "single", "capacity": 10, "delay_ratio": 1},
        "workload": {"kind": "zipf", "n_objects": 100}
    }"#;

    #[test]
    fn single_cache_config() {
        let cfg = Config::from_json(SINGLE).unwrap();
        let p = cfg.prepare(None).unwrap();
        assert_eq!(p.instance.n_objects(), 100);
        assert_eq!(p.lambda_hot, 1.0);
        assert_eq!(p.instance.tree.fetch_rate(0), 1.0);
        let p4 = cfg.prepare(Some(4.0)).unwrap();
        assert_eq!(p4.instance.tree.fetch_rate(0), 0.25);
        assert_eq!(cfg.sweep.rho_grid, DEFAULT_RHO_GRID.to_vec());
        assert_eq!(cfg.simulation.horizon, 500_000);
    }

    #[test]
    fn unknown_field_is_named() {
        let bad = SINGLE.replace("\"capacity\"", "\"capacty\"");
        let e = Config::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("capacty"), "{e}");
        let missing = r#"{"tree": {"shape": "single", "capacity": 1}}"#;
        let e = Config::from_json(missing).unwrap_err().to_string();
        assert!(e.contains("workload"), "{e}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::from_json(SINGLE).unwrap();
        let b = Config::from_json(&SINGLE.replace("  ", " ")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::from_json(&SINGLE.replace("100", "99")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn default_compare_has_five_entries() {
        let cfg = Config::from_json(SINGLE).unwrap();
        let labels: Vec<_> = cfg.compare_entries().entries.into_iter().map(|e| e.label).collect();
        assert_eq!(labels, ["OPT|delay", "OPT|ideal", "LRU", "FIFO", "RANDOM"]);
    }

    #[test]
    fn rates_workload_checks_leaf_count() {
        let cfg = Config::from_json(
            r#"{"tree": {"shape": "binary", "capacity": 2},
                "workload": {"kind": "rates", "rates": [[1, 0.5], [0.2]]}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.prepare(None), Err(Error::Config(_))));
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[1.0, -1.0]).is_err());
        assert!(check_grid(&[0.5]).is_ok());
    }
}
