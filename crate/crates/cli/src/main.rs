use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ttlcache::config::{check_grid, Config, DEFAULT_RHO_GRID};
use ttlcache::experiment::{
    analytic_summary, cold_ids, compare, optimize, policy_deviation, report_tables, scaling, scenario,
    simulated_utility, single_cache_figure, sweep, write_table, TableFormat,
};
use ttlcache::sim::{simulate, Policy};
use ttlcache::solver::{write_iterate_log, SolverOptions};
use ttlcache::utility::UtilitySpec;
use ttlcache::workload::{synthesize_trace, write_trace, ZipfSpec, RATE_ESTIMATOR};
use ttlcache::{ttl_file, Error};

#[derive(Parser)]
#[command(name = "ttlopt", version, about = "Optimize and simulate TTL cache hierarchies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for utility-optimal TTLs.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Delay ratio overriding the config.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Simulate a hierarchy under a replacement policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ttl: Option<PathBuf>,
        #[arg(long)]
        policy: Option<Policy>,
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Compare optimized and classic hierarchies over delay ratios.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: Run,
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long, default_value = "csv")]
        format: TableFormat,
    },
    /// Optimize at every delay ratio of a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long, default_value = "csv")]
        format: TableFormat,
    },
    /// Regenerate figure data tables.
    Figures {
        /// Base hierarchy config; defaults to a binary tree with 100 objects and capacity 5.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        run: Run,
        #[arg(long, value_delimiter = ',')]
        rho_grid: Option<Vec<f64>>,
        #[arg(long, default_value = "csv")]
        format: TableFormat,
        /// Subset of {single, compare, policies, scaling}.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
    /// Answer evaluation requests on stdin, one JSON line each.
    Serve,
    /// Write a synthetic trace for the config's Zipf workload.
    SynthTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        requests: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
}

enum Failure {
    Core(Error),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Out<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged(msg)) => {
            eprintln!("error: solver did not converge: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::from(4),
            }
        }
    }
}

fn run(cmd: Cmd) -> Out<()> {
    match cmd {
        Cmd::Optimize { common, rho } => cmd_optimize(&common, rho),
        Cmd::Simulate {
            common,
            ttl,
            policy,
            run,
            rho,
        } => cmd_simulate(&common, ttl.as_deref(), policy, &run, rho),
        Cmd::Compare {
            common,
            run,
            rho_grid,
            format,
        } => {
            let cfg = Config::load(&common.config)?;
            let grid = rho_grid.unwrap_or_else(|| cfg.sweep.rho_grid.clone());
            let (seed, horizon) = run_params(&cfg, &run);
            let rows = compare(&cfg, &cfg.compare_entries().entries, &grid, seed, horizon)?;
            write_file(&common.out_dir, &format!("compare.{}", format.extension()), |w| {
                write_table(&rows, format, w)
            })?;
            write_json(
                &common.out_dir,
                "compare.meta.json",
                &json!({"config_hash": cfg.hash(), "seed": seed, "horizon": horizon, "rho_grid": grid}),
            )?;
            for r in &rows {
                println!("{:<12} rho_d={:<6} utility={:.4} offloading={:.4}", r.label, r.rho_d, r.utility, r.offloading);
            }
            Ok(())
        }
        Cmd::Sweep {
            common,
            rho_grid,
            format,
        } => {
            let cfg = Config::load(&common.config)?;
            let grid = rho_grid.unwrap_or_else(|| cfg.sweep.rho_grid.clone());
            check_grid(&grid)?;
            let prepared = cfg.prepare(Some(grid[0]))?;
            let out = sweep(&cfg, &grid)?;
            for (row, x) in &out {
                let rows = ttl_file::rows(x, &prepared.labels, &cold_ids(&prepared));
                write_file(&common.out_dir, &format!("ttl_rho{}.csv", row.rho_d), |w| ttl_file::write(&rows, w))?;
            }
            let rows: Vec<_> = out.into_iter().map(|(r, _)| r).collect();
            write_file(&common.out_dir, &format!("sweep.{}", format.extension()), |w| {
                write_table(&rows, format, w)
            })?;
            write_json(
                &common.out_dir,
                "sweep.meta.json",
                &json!({"config_hash": cfg.hash(), "rho_grid": grid}),
            )?;
            if rows.iter().any(|r| !r.converged) {
                return Err(Failure::NotConverged("at least one sweep point".into()));
            }
            Ok(())
        }
        Cmd::Figures {
            config,
            out_dir,
            run,
            rho_grid,
            format,
            only,
        } => cmd_figures(config.as_deref(), &out_dir, &run, rho_grid, format, only),
        Cmd::Serve => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            ttlcache::eval::serve(stdin.lock(), stdout.lock())?;
            Ok(())
        }
        Cmd::SynthTrace { config, requests, out } => {
            let cfg = Config::load(&config)?;
            let p = cfg.prepare(None)?;
            let spec = match &cfg.workload {
                ttlcache::config::WorkloadConfig::Zipf {
                    n_objects,
                    s,
                    homogeneous,
                    seed,
                    ..
                } => ZipfSpec {
                    n_objects: *n_objects,
                    s: *s,
                    n_leaves: p.instance.tree.n_leaves(),
                    homogeneous: *homogeneous,
                    seed: *seed,
                },
                _ => return Err(Error::Config("synth-trace needs a zipf workload".into()).into()),
            };
            let rows = synthesize_trace(&spec, requests)?;
            write_trace(&rows, BufWriter::new(File::create(&out)?))?;
            Ok(())
        }
    }
}

fn run_params(cfg: &Config, run: &Run) -> (u64, u64) {
    (
        run.seed.unwrap_or(cfg.simulation.seed),
        run.horizon.unwrap_or(cfg.simulation.horizon),
    )
}

fn write_file<F>(dir: &Path, name: &str, f: F) -> Out<()>
where
    F: FnOnce(&mut BufWriter<File>) -> ttlcache::Result<()>,
{
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> Out<()> {
    write_file(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, v)?;
        writeln!(w)?;
        Ok(())
    })
}

fn cmd_optimize(c: &Common, rho: Option<f64>) -> Out<()> {
    let cfg = Config::load(&c.config)?;
    let p = cfg.prepare(rho)?;
    let o = optimize(&p.instance, &cfg.solver)?;
    let r = &o.result;
    let rows = ttl_file::rows(&r.state.x, &p.labels, &cold_ids(&p));
    write_file(&c.out_dir, "ttl.csv", |w| ttl_file::write(&rows, w))?;
    write_file(&c.out_dir, "iterations.jsonl", |w| write_iterate_log(&r.log, w))?;
    let a = analytic_summary(&p.instance, &r.state.x)?;
    let mut meta = json!({
        "converged": r.converged,
        "message": r.message,
        "objective": r.state.objective,
        "utility": a.utility,
        "offloading": a.offloading,
        "residuals": r.state.residuals,
        "iterations": r.iterations,
        "wall_time": o.wall_time,
        "config_hash": cfg.hash(),
        "n_objects": p.instance.n_objects(),
        "n_caches": p.instance.n_caches(),
        "fetch_rate": p.instance.tree.fetch_rate(0),
    });
    if let Some(t) = &p.trace {
        meta["rate_estimator"] = json!(RATE_ESTIMATOR);
        meta["dropped_objects"] = json!(t.dropped.len());
    }
    write_json(&c.out_dir, "optimize.json", &meta)?;
    println!(
        "{:>6} {:>6} {:>10} {:>14} {:>10} {:>8}",
        "outer", "inner", "eta", "f", "c_inf", "alpha"
    );
    for rec in &r.log {
        println!(
            "{:>6} {:>6} {:>10.3e} {:>14.8} {:>10.2e} {:>8.4}",
            rec.outer, rec.inner, rec.eta, rec.f, rec.c_inf, rec.alpha
        );
    }
    println!(
        "converged={} objective={:.10} iterations={} wall_time={:.3}s",
        r.converged, r.state.objective, r.iterations, o.wall_time
    );
    if !r.converged {
        return Err(Failure::NotConverged(r.message.clone()));
    }
    Ok(())
}

fn cmd_simulate(c: &Common, ttl: Option<&Path>, policy: Option<Policy>, run: &Run, rho: Option<f64>) -> Out<()> {
    let cfg = Config::load(&c.config)?;
    let p = cfg.prepare(rho)?;
    let inst = &p.instance;
    let policy = policy.unwrap_or(cfg.simulation.policy);
    let x = match ttl {
        Some(path) => {
            let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let rows = ttl_file::read(BufReader::new(f))?;
            Some(ttl_file::to_config(&rows, &p.labels, inst.n_caches())?)
        }
        None if policy.uses_ttl() => {
            return Err(Error::Config(format!("policy {policy} needs --ttl")).into());
        }
        None => None,
    };
    let (seed, horizon) = run_params(&cfg, run);
    let s = scenario(inst, policy, x, &cfg.simulation, seed, horizon)?;
    let rep = simulate(&s)?;
    let utility = simulated_utility(inst, &rep, cfg.simulation.rate_source)?;
    if rep.low_confidence {
        log::warn!("only {} measured requests; estimates are low confidence", rep.measured_requests);
    }
    let (objs, caches) = report_tables(&rep, &p.labels, &inst.tree);
    write_file(&c.out_dir, "objects.csv", |w| write_table(&objs, TableFormat::Csv, w))?;
    write_file(&c.out_dir, "caches.csv", |w| write_table(&caches, TableFormat::Csv, w))?;
    let meta = json!({
        "config_hash": cfg.hash(),
        "utility": utility,
        "rate_source": cfg.simulation.rate_source,
        "report": rep,
    });
    write_json(&c.out_dir, "report.json", &meta)?;
    println!(
        "policy={} seed={} horizon={} utility={:.6} offloading={:.6} low_confidence={}",
        policy, seed, horizon, utility, rep.offloading, rep.low_confidence
    );
    Ok(())
}

fn default_tree_config() -> Config {
    Config::from_json(
        r#"{"tree": {"shape": "binary", "capacity": 5},
            "workload": {"kind": "zipf", "n_objects": 100}}"#,
    )
    .expect("builtin config")
}

fn cmd_figures(
    config: Option<&Path>,
    out: &Path,
    run: &Run,
    grid: Option<Vec<f64>>,
    format: TableFormat,
    only: Option<Vec<String>>,
) -> Out<()> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => default_tree_config(),
    };
    let grid = grid.unwrap_or_else(|| DEFAULT_RHO_GRID.to_vec());
    let want = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|s| s == name));
    let (seed, horizon) = run_params(&cfg, run);
    let table = |name: &str| format!("{name}.{}", format.extension());

    if want("single") {
        let rows = single_cache_figure(&grid)?;
        if let Some(r) = rows.iter().find(|r| !r.converged) {
            return Err(Failure::NotConverged(format!("single cache at rho_d={}", r.rho_d)));
        }
        write_file(out, &table("single_cache"), |w| write_table(&rows, format, w))?;
    }
    if want("compare") {
        let rows = compare(&cfg, &cfg.compare_entries().entries, &grid, seed, horizon)?;
        write_file(out, &table("delay_compare"), |w| write_table(&rows, format, w))?;
    }
    if want("policies") {
        let rows = policy_deviation(&cfg, &[Policy::TtlMin, Policy::TtlMinExtnd], &grid, seed, horizon)?;
        write_file(out, &table("policy_deviation"), |w| write_table(&rows, format, w))?;
    }
    if want("scaling") {
        let rows = scaling(&[1, 2, 3, 4], 30, 4.0, UtilitySpec::proportional(), &SolverOptions::default())?;
        write_file(out, &table("scaling"), |w| write_table(&rows, format, w))?;
    }
    write_json(
        out,
        "figures.json",
        &json!({"config_hash": cfg.hash(), "seed": seed, "horizon": horizon, "rho_grid": grid}),
    )?;
    Ok(())
}
