//! Optimize, simulate and compare hierarchies over delay-ratio grids.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::single_cache_closed_form_capped;
use crate::config::{check_grid, CompareEntry, Config, Prepared, SimulationConfig, TtlSource};
use crate::error::{Error, Result};
use crate::objective::{evaluate, Order, ProblemInstance, TtlConfig};
use crate::sim::{simulate, Policy, RateSource, Scenario, SimReport};
use crate::solver::{initial_point, solve, SolveResult, SolverOptions};
use crate::tree::CacheTree;
use crate::ttl_file;
use crate::workload::{demands_from_rates, zipf_rates, ZipfSpec};

/// Fetch rate standing in for zero download delay.
pub const IDEAL_FETCH_RATE: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct Optimized {
    pub result: SolveResult,
    pub wall_time: f64,
}

pub fn optimize(inst: &ProblemInstance, opts: &SolverOptions) -> Result<Optimized> {
    let t = Instant::now();
    let x0 = initial_point(inst)?;
    let result = solve(inst, &x0, opts)?;
    Ok(Optimized {
        result,
        wall_time: t.elapsed().as_secs_f64(),
    })
}

/// The same instance with (almost) instantaneous downloads.
pub fn ideal_instance(inst: &ProblemInstance) -> Result<ProblemInstance> {
    let mut out = inst.clone();
    out.tree = inst.tree.with_fetch_rate(IDEAL_FETCH_RATE)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSummary {
    /// Weighted utility (the negated objective).
    pub utility: f64,
    /// Fraction of request rate served by the hierarchy.
    pub offloading: f64,
    pub object_utility: Vec<f64>,
    pub system_hit: Vec<f64>,
    pub leaf_hit: Vec<Vec<Option<f64>>>,
    /// Expected number of stored objects per cache.
    pub occupancy: Vec<f64>,
}

pub fn analytic_summary(inst: &ProblemInstance, x: &TtlConfig) -> Result<AnalyticSummary> {
    let ev = evaluate(inst, x, Order::Value)?;
    let mut occupancy = vec![0.0; inst.n_caches()];
    let (mut served, mut total) = (0.0, 0.0);
    for (i, o) in ev.objects.iter().enumerate() {
        for (k, v) in o.occupancy.iter().enumerate() {
            occupancy[k] += v;
        }
        for (j, p) in o.leaf_hit.iter().enumerate() {
            let l = inst.demands[i].rate(j);
            served += l * p.unwrap_or(0.0);
            total += l;
        }
    }
    Ok(AnalyticSummary {
        utility: ev.objects.iter().map(|o| o.utility).sum(),
        offloading: served / total,
        object_utility: ev.objects.iter().map(|o| o.utility).collect(),
        system_hit: ev.objects.iter().map(|o| o.system_hit).collect(),
        leaf_hit: ev.objects.iter().map(|o| o.leaf_hit.clone()).collect(),
        occupancy,
    })
}

/// Per-object utility of a simulation, weighted like the instance objective.
/// With measured rates the weights are the observed request rates.
pub fn simulated_object_utilities(inst: &ProblemInstance, r: &SimReport, src: RateSource) -> Result<Vec<f64>> {
    r.objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut v = 0.0;
            for (j, p) in o.hit_prob.iter().enumerate() {
                if let Some(p) = p {
                    let w = match src {
                        RateSource::Configured => inst.weight(i, j),
                        RateSource::Measured => r.measured_rate(i, j),
                    };
                    v += w * inst.utility.value(*p)?;
                }
            }
            Ok(v)
        })
        .collect()
}

pub fn simulated_utility(inst: &ProblemInstance, r: &SimReport, src: RateSource) -> Result<f64> {
    Ok(simulated_object_utilities(inst, r, src)?.iter().sum())
}

pub fn scenario(
    inst: &ProblemInstance,
    policy: Policy,
    ttl: Option<TtlConfig>,
    sim: &SimulationConfig,
    seed: u64,
    horizon: u64,
) -> Result<Scenario> {
    let ttl = if policy.uses_ttl() {
        ttl
    } else {
        if ttl.is_some() {
            log::warn!("policy {policy} ignores the TTL assignment");
        }
        None
    };
    let mut s = Scenario::new(inst.tree.clone(), inst.demands.clone(), policy, ttl, horizon, seed)?;
    s.options = sim.options();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub rho_d: f64,
    pub policy: Policy,
    pub utility: f64,
    pub offloading: f64,
    pub analytic_utility: Option<f64>,
    pub analytic_offloading: Option<f64>,
    pub converged: Option<bool>,
    pub low_confidence: bool,
}

fn solve_or_warn(inst: &ProblemInstance, opts: &SolverOptions, what: &str) -> Result<SolveResult> {
    let r = optimize(inst, opts)?.result;
    if !r.converged {
        log::warn!("{what}: solver did not converge ({})", r.message);
    }
    Ok(r)
}

/// Solve every grid point, then re-solve each point from its neighbours'
/// optima until no objective improves. The optimal hit probabilities barely
/// move with the delay ratio while cold starts land in different local
/// optima, so this keeps a sweep on one branch.
fn solve_grid(cfg: &Config, grid: &[f64], what: &str) -> Result<Vec<(Prepared, SolveResult)>> {
    let mut sols = grid
        .par_iter()
        .map(|&rho| {
            let p = cfg.prepare(Some(rho))?;
            let r = optimize(&p.instance, &cfg.solver)?.result;
            Ok((p, r))
        })
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..grid.len() {
        let starts: Vec<TtlConfig> = sols.iter().map(|(_, r)| r.state.x.clone()).collect();
        let better = sols
            .par_iter()
            .enumerate()
            .map(|(a, (p, cur))| -> Result<Option<SolveResult>> {
                let mut best: Option<SolveResult> = None;
                for b in [a.wrapping_sub(1), a + 1] {
                    let Some(x0) = starts.get(b) else { continue };
                    let r = solve(&p.instance, x0, &cfg.solver)?;
                    let inc = best.as_ref().unwrap_or(cur);
                    if improves(&r, inc) {
                        best = Some(r);
                    }
                }
                Ok(best)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut changed = false;
        for (slot, b) in sols.iter_mut().zip(better) {
            if let Some(r) = b {
                slot.1 = r;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (rho, (_, r)) in grid.iter().zip(&sols) {
        if !r.converged {
            log::warn!("{what} at rho_d={rho}: solver did not converge ({})", r.message);
        }
    }
    Ok(sols)
}

fn improves(r: &SolveResult, cur: &SolveResult) -> bool {
    let o = cur.state.objective;
    r.converged && (!cur.converged || r.state.objective < o - 1e-9 * o.abs().max(1.0))
}

/// One row per (entry, delay ratio). Sweep points run in parallel.
pub fn compare(
    cfg: &Config,
    entries: &[CompareEntry],
    grid: &[f64],
    seed: u64,
    horizon: u64,
) -> Result<Vec<CompareRow>> {
    check_grid(grid)?;
    if entries.is_empty() {
        return Err(Error::param("nothing to compare"));
    }
    let base = cfg.prepare(Some(grid[0]))?;
    let ideal = if entries.iter().any(|e| e.ttl == TtlSource::OptIdeal) {
        Some(solve_or_warn(&ideal_instance(&base.instance)?, &cfg.solver, "OPT|ideal")?)
    } else {
        None
    };
    let files = entries
        .iter()
        .map(|e| match &e.ttl {
            TtlSource::File(p) => {
                let f = std::fs::File::open(p).map_err(|err| Error::Config(format!("{}: {err}", p.display())))?;
                let rows = ttl_file::read(f)?;
                ttl_file::to_config(&rows, &base.labels, base.instance.n_caches()).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(Prepared, Option<SolveResult>)> = if entries.iter().any(|e| e.ttl == TtlSource::OptDelay) {
        solve_grid(cfg, grid, "OPT|delay")?.into_iter().map(|(p, r)| (p, Some(r))).collect()
    } else {
        grid.iter().map(|&rho| Ok((cfg.prepare(Some(rho))?, None))).collect::<Result<_>>()?
    };
    let per_rho = grid
        .par_iter()
        .zip(points.par_iter())
        .map(|(&rho, (p, delay))| -> Result<Vec<CompareRow>> {
            let inst = &p.instance;
            entries
                .par_iter()
                .zip(files.par_iter())
                .map(|(e, file)| {
                    let (ttl, converged) = match &e.ttl {
                        TtlSource::None => (None, None),
                        TtlSource::OptDelay => {
                            let r = delay.as_ref().expect("solved");
                            (Some(r.state.x.clone()), Some(r.converged))
                        }
                        TtlSource::OptIdeal => {
                            let r = ideal.as_ref().expect("solved");
                            (Some(r.state.x.clone()), Some(r.converged))
                        }
                        TtlSource::File(_) => (file.clone(), None),
                    };
                    let analytic = ttl.as_ref().map(|x| analytic_summary(inst, x)).transpose()?;
                    let s = scenario(inst, e.policy, ttl, &cfg.simulation, seed, horizon)?;
                    let rep = simulate(&s)?;
                    Ok(CompareRow {
                        label: e.label.clone(),
                        rho_d: rho,
                        policy: e.policy,
                        utility: simulated_utility(inst, &rep, cfg.simulation.rate_source)?,
                        offloading: rep.offloading,
                        analytic_utility: analytic.as_ref().map(|a| a.utility),
                        analytic_offloading: analytic.as_ref().map(|a| a.offloading),
                        converged,
                        low_confidence: rep.low_confidence,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    // entry-major order
    let mut rows = Vec::with_capacity(entries.len() * grid.len());
    for k in 0..entries.len() {
        for r in &per_rho {
            rows.push(r[k].clone());
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho_d: f64,
    pub fetch_rate: f64,
    pub objective: f64,
    pub utility: f64,
    pub offloading: f64,
    pub primal_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn sweep(cfg: &Config, grid: &[f64]) -> Result<Vec<(SweepRow, TtlConfig)>> {
    check_grid(grid)?;
    let points = solve_grid(cfg, grid, "sweep")?;
    grid.par_iter()
        .zip(points.into_par_iter())
        .map(|(&rho, (p, r))| {
            let a = analytic_summary(&p.instance, &r.state.x)?;
            Ok((
                SweepRow {
                    rho_d: rho,
                    fetch_rate: p.instance.tree.fetch_rate(0),
                    objective: r.state.objective,
                    utility: a.utility,
                    offloading: a.offloading,
                    primal_residual: r.state.residuals.primal,
                    iterations: r.iterations,
                    converged: r.converged,
                },
                r.state.x,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDeviationRow {
    pub rho_d: f64,
    pub policy: Policy,
    pub simulated_utility: f64,
    pub optimal_utility: f64,
    /// `|simulated - optimal| / |optimal|`.
    pub deviation: f64,
    pub converged: bool,
}

/// Realize the delay-aware optimum with finite-capacity TTL policies.
pub fn policy_deviation(
    cfg: &Config,
    policies: &[Policy],
    grid: &[f64],
    seed: u64,
    horizon: u64,
) -> Result<Vec<PolicyDeviationRow>> {
    check_grid(grid)?;
    let points = solve_grid(cfg, grid, "OPT|delay")?;
    let per_rho = grid
        .par_iter()
        .zip(points.par_iter())
        .map(|(&rho, (p, r))| -> Result<Vec<PolicyDeviationRow>> {
            let inst = &p.instance;
            let opt = analytic_summary(inst, &r.state.x)?.utility;
            policies
                .par_iter()
                .map(|&pol| {
                    let s = scenario(inst, pol, Some(r.state.x.clone()), &cfg.simulation, seed, horizon)?;
                    let rep = simulate(&s)?;
                    let u = simulated_utility(inst, &rep, cfg.simulation.rate_source)?;
                    Ok(PolicyDeviationRow {
                        rho_d: rho,
                        policy: pol,
                        simulated_utility: u,
                        optimal_utility: opt,
                        deviation: (u - opt).abs() / opt.abs(),
                        converged: r.converged,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rho.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_caches: usize,
    pub n_objects: usize,
    /// Markov states summed over objects.
    pub states: usize,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

/// Exact-solver wall time on two-level trees of growing size.
pub fn scaling(
    n_caches: &[usize],
    n_objects: usize,
    capacity: f64,
    utility: crate::utility::UtilitySpec,
    opts: &SolverOptions,
) -> Result<Vec<ScalingRow>> {
    n_caches
        .iter()
        .map(|&nc| {
            let tree = CacheTree::two_level(nc, capacity, 1.0)?;
            let rates = zipf_rates(&ZipfSpec::new(n_objects, 0.8, tree.n_leaves()))?;
            let inst = ProblemInstance::new(tree, demands_from_rates(&rates)?, utility)?;
            let x0 = initial_point(&inst)?;
            let mut states = 0;
            for i in 0..n_objects {
                states += inst.object_model(i, x0.object(i))?.n_states();
            }
            let o = optimize(&inst, opts)?;
            Ok(ScalingRow {
                n_caches: nc,
                n_objects,
                states,
                iterations: o.result.iterations,
                converged: o.result.converged,
                wall_time: o.wall_time,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleCacheRow {
    pub rho_d: f64,
    pub object: usize,
    pub rate: f64,
    pub hit_prob: f64,
    pub closed_form_hit: f64,
    pub ttl_rate: f64,
    pub converged: bool,
}

/// Single cache, 100 Zipf objects, capacity 10, log utility, fetch rate `1/rho_d`.
pub fn single_cache_figure(grid: &[f64]) -> Result<Vec<SingleCacheRow>> {
    check_grid(grid)?;
    let u = crate::utility::UtilitySpec::proportional();
    let rates = zipf_rates(&ZipfSpec::new(100, 0.8, 1))?;
    let flat: Vec<f64> = rates.iter().map(|r| r[0]).collect();
    let per_rho = grid
        .par_iter()
        .map(|&rho| -> Result<Vec<SingleCacheRow>> {
            let phi = 1.0 / rho;
            let inst = ProblemInstance::new(CacheTree::single(10.0, phi)?, demands_from_rates(&rates)?, u)?;
            let o = optimize(&inst, &SolverOptions::default())?;
            let cf = single_cache_closed_form_capped(&flat, phi, 10.0, &u)?;
            let a = analytic_summary(&inst, &o.result.state.x)?;
            Ok((0..flat.len())
                .map(|i| SingleCacheRow {
                    rho_d: rho,
                    object: i,
                    rate: flat[i],
                    hit_prob: a.system_hit[i],
                    closed_form_hit: cf.hit[i],
                    ttl_rate: o.result.state.x.get(i, 0),
                    converged: o.result.converged,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rho.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRow {
    pub object_id: String,
    pub leaf: usize,
    pub requests: u64,
    pub hits: u64,
    pub hit_prob: Option<f64>,
    pub hit_prob_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    pub cache_id: usize,
    pub capacity: f64,
    pub occupancy: f64,
}

pub fn report_tables(r: &SimReport, labels: &[String], tree: &CacheTree) -> (Vec<ObjectRow>, Vec<CacheRow>) {
    let mut objs = Vec::new();
    for (o, id) in r.objects.iter().zip(labels) {
        for j in 0..o.requests.len() {
            objs.push(ObjectRow {
                object_id: id.clone(),
                leaf: j,
                requests: o.requests[j],
                hits: o.hits[j],
                hit_prob: o.hit_prob[j],
                hit_prob_se: o.hit_prob_se[j],
            });
        }
    }
    let caches = r
        .cache_occupancy
        .iter()
        .enumerate()
        .map(|(k, &v)| CacheRow {
            cache_id: k,
            capacity: tree.capacity(k),
            occupancy: v,
        })
        .collect();
    (objs, caches)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            _ => Err(Error::Config(format!("unknown format {s:?}"))),
        }
    }
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

pub fn write_table<T: Serialize, W: Write>(rows: &[T], format: TableFormat, mut w: W) -> Result<()> {
    match format {
        TableFormat::Csv => {
            let mut wr = csv::Writer::from_writer(w);
            for r in rows {
                wr.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
            }
            wr.flush()?;
        }
        TableFormat::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Never-cache ids for the cold objects of a trace workload.
pub fn cold_ids(p: &Prepared) -> Vec<String> {
    p.trace.as_ref().map(|t| t.dropped.clone()).unwrap_or_default()
}
