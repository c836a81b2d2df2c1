//! Primal-dual interior-point method for
//!
//! ```text
//! min f(x)  s.t.  c(x) = 0,  x >= 0
//! ```
//!
//! with a log barrier on the bounds, a sequence of decreasing barrier
//! parameters, and an Armijo backtracking search on an l1-penalty merit
//! function.

mod kkt;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use kkt::{fraction_to_boundary, newton_step, KktFactor, NewtonStep};

use crate::closed_form::single_cache_ttl_for_hit;
use crate::error::{Error, Result};
use crate::model::{INFINITE_TTL_RATE, NEVER_CACHE_RATE};
use crate::objective::{evaluate, Evaluation, Order, ProblemInstance, TtlConfig};

/// Bound-multiplier safeguard factor.
const KAPPA_SIGMA: f64 = 1e10;
/// Second-order corrections tried per line search.
const MAX_SOC: usize = 4;
/// Damping `reg / x^2` added after heavily backtracked steps, bounding the
/// relative change of each rate; relaxed again after full steps.
const DAMP_START: f64 = 1e-6;
const DAMP_MAX: f64 = 1e6;
const SHORT_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub eps_tol: f64,
    pub kappa: f64,
    pub theta: f64,
    pub eps_min: f64,
    pub eta0: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_tol: 1e-8,
            kappa: 0.2,
            theta: 1.5,
            eps_min: 0.99,
            eta0: 0.1,
            max_outer: 50,
            max_inner: 200,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::Config(format!("solver.{name} is out of range")));
        if !(self.eps_tol > 0.0) {
            return bad("eps_tol");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("kappa");
        }
        if !(self.theta > 1.0 && self.theta <= 2.0) {
            return bad("theta");
        }
        if !(self.eps_min > 0.0 && self.eps_min < 1.0) {
            return bad("eps_min");
        }
        if !(self.eta0 > 0.0) {
            return bad("eta0");
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return bad("armijo");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack");
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.max_backtracks == 0 {
            return bad("max_outer/max_inner/max_backtracks");
        }
        Ok(())
    }

    fn eta_floor(&self) -> f64 {
        self.eps_tol / 10.0
    }
}

/// `max{eps_tol/10, min{kappa eta, eta^theta}}`.
pub fn barrier_update(eta: f64, opts: &SolverOptions) -> f64 {
    opts.eta_floor().max((opts.kappa * eta).min(eta.powf(opts.theta)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `||grad f + J nu - z||_inf`
    pub dual: f64,
    /// `||c||_inf`
    pub primal: f64,
    /// `||XZ1 - eta 1||_inf`
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.dual.max(self.primal).max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct KktState {
    pub x: TtlConfig,
    pub nu: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: f64,
    /// Residuals of the original problem (complementarity against zero).
    pub residuals: Residuals,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub outer: usize,
    pub inner: usize,
    pub eta: f64,
    pub f: f64,
    pub c_inf: f64,
    pub alpha: f64,
    pub alpha_z: f64,
    /// Merit before the step, same `eta` and `rho`.
    pub merit_prev: f64,
    pub merit: f64,
    pub rho: f64,
    pub delta: f64,
    pub soc: bool,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub state: KktState,
    pub log: Vec<IterateRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
}

pub fn write_iterate_log<W: Write>(log: &[IterateRecord], mut w: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Start where each object's isolated occupancy at cache `k` is `B_k / N`,
/// inverting the memoryless single-cache hit probability with the request
/// rate of the subtree below `k`.
pub fn initial_point(inst: &ProblemInstance) -> Result<TtlConfig> {
    let n = inst.n_objects();
    let n_c = inst.n_caches();
    let mut x = Vec::with_capacity(n * n_c);
    let below: Vec<Vec<usize>> = (0..n_c).map(|k| inst.tree.leaves_below(k)).collect();
    for d in &inst.demands {
        for k in 0..n_c {
            let lam: f64 = below[k].iter().map(|&j| d.rate(j)).sum();
            let p = (inst.tree.capacity(k) / n as f64).min(0.5);
            let mu = if lam > 0.0 {
                single_cache_ttl_for_hit(lam, inst.tree.fetch_rate(k), p)
            } else {
                1.0
            };
            x.push(mu);
        }
    }
    TtlConfig::new(n, n_c, x)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

struct Point {
    x: Vec<f64>,
    ev: Evaluation,
    grad: Vec<f64>,
    jac: DMatrix<f64>,
}

impl Point {
    fn new(inst: &ProblemInstance, x: Vec<f64>) -> Result<Self> {
        let cfg = TtlConfig::new(inst.n_objects(), inst.n_caches(), x.clone())?;
        let ev = evaluate(inst, &cfg, Order::Second)?;
        let grad = ev.grad();
        let jac = ev.jacobian();
        Ok(Self { x, ev, grad, jac })
    }

    fn residuals(&self, nu: &[f64], z: &[f64], eta: f64) -> Residuals {
        let jnu = &self.jac * nalgebra::DVector::from_column_slice(nu);
        let dual = (0..self.x.len())
            .map(|i| (self.grad[i] + jnu[i] - z[i]).abs())
            .fold(0.0, f64::max);
        let complementarity = (0..self.x.len())
            .map(|i| (self.x[i] * z[i] - eta).abs())
            .fold(0.0, f64::max);
        Residuals {
            dual,
            primal: inf_norm(&self.ev.c),
            complementarity,
        }
    }

    /// Diagonal blocks of the Lagrangian Hessian.
    fn hessian_blocks(&self, nu: &[f64]) -> Vec<DMatrix<f64>> {
        self.ev
            .objects
            .iter()
            .map(|o| {
                let mut h = o.hess.clone();
                for (k, ch) in o.occ_hess.iter().enumerate() {
                    h += ch * nu[k];
                }
                (&h + h.transpose()) * 0.5
            })
            .collect()
    }
}

fn merit(f: f64, x: &[f64], c: &[f64], eta: f64, rho: f64) -> f64 {
    f - eta * x.iter().map(|v| v.ln()).sum::<f64>() + rho * l1_norm(c)
}

fn value_at(inst: &ProblemInstance, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cfg = TtlConfig::new(inst.n_objects(), inst.n_caches(), x.to_vec())?;
    let ev = evaluate(inst, &cfg, Order::Value)?;
    Ok((ev.f, ev.c))
}

fn snapshot(inst: &ProblemInstance, p: &Point, nu: &[f64], z: &[f64], eta: f64) -> Result<KktState> {
    Ok(KktState {
        x: TtlConfig::new(inst.n_objects(), inst.n_caches(), p.x.clone())?,
        nu: nu.to_vec(),
        z: z.to_vec(),
        eta,
        residuals: p.residuals(nu, z, 0.0),
        objective: p.ev.f,
    })
}

/// Every cache can hold all objects: never expire anything.
fn unconstrained_optimum(inst: &ProblemInstance) -> Result<SolveResult> {
    let x = TtlConfig::uniform(inst.n_objects(), inst.n_caches(), INFINITE_TTL_RATE)?;
    let ev = evaluate(inst, &x, Order::First)?;
    Ok(SolveResult {
        state: KktState {
            z: ev.grad().iter().map(|g| g.max(0.0)).collect(),
            nu: vec![0.0; inst.n_caches()],
            eta: 0.0,
            residuals: Residuals {
                dual: 0.0,
                primal: 0.0,
                complementarity: 0.0,
            },
            objective: ev.f,
            x,
        },
        log: Vec::new(),
        converged: true,
        iterations: 0,
        message: "capacity not binding; all TTLs infinite".into(),
    })
}

pub fn solve(inst: &ProblemInstance, x0: &TtlConfig, opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    let n = inst.n_vars();
    if x0.as_slice().len() != n {
        return Err(Error::param("initial point has the wrong dimension"));
    }
    let m = inst.n_caches();
    // Occupancies stay below one object each, so an equality with B_k >= N
    // cannot hold for finite rates.
    let slack: Vec<usize> = (0..m)
        .filter(|&k| inst.tree.capacity(k) >= inst.n_objects() as f64)
        .collect();
    if slack.len() == m {
        return unconstrained_optimum(inst);
    } else if !slack.is_empty() {
        return Err(Error::param(format!(
            "caches {slack:?} can hold every object while others cannot; their capacity equality is infeasible"
        )));
    }
    let mut eta = opts.eta0;
    let mut p = Point::new(inst, x0.as_slice().to_vec())?;
    let mut z: Vec<f64> = p.x.iter().map(|x| eta / x).collect();
    let mut nu = vec![0.0; m];
    let mut log = Vec::new();
    let mut restored = false;
    let mut damp = 0.0f64;
    let mut best: Option<KktState> = None;
    let mut iterations = 0;
    let floor = opts.eta_floor();

    for outer in 0..opts.max_outer {
        let mut rho = 2.0 * inf_norm(&nu) + 1.0;
        let mut inner = 0;
        loop {
            let r0 = p.residuals(&nu, &z, 0.0);
            if best.as_ref().is_none_or(|b| r0.max() < b.residuals.max()) {
                best = Some(snapshot(inst, &p, &nu, &z, eta)?);
            }
            if r0.max() <= opts.eps_tol && eta <= opts.eps_tol {
                return Ok(SolveResult {
                    state: snapshot(inst, &p, &nu, &z, eta)?,
                    log,
                    converged: true,
                    iterations,
                    message: "converged".into(),
                });
            }
            let r_eta = p.residuals(&nu, &z, eta);
            if r_eta.max() <= 10.0 * eta && eta > floor {
                break;
            }
            if inner >= opts.max_inner {
                return Ok(not_converged(best, log, iterations, "inner iteration limit reached"));
            }

            // Rates at the never-cache sentinel are fixed there: the model
            // is constant beyond it, so their rows only carry the barrier.
            let fixed: Vec<bool> = p.x.iter().map(|&v| v >= NEVER_CACHE_RATE).collect();
            let h = p.hessian_blocks(&nu);
            let sigma: Vec<f64> = (0..n)
                .map(|i| if fixed[i] { 1.0 } else { (z[i] + damp / p.x[i]) / p.x[i] })
                .collect();
            let factor = KktFactor::new(&h, &sigma, &p.jac)?;
            let jnu = &p.jac * nalgebra::DVector::from_column_slice(&nu);
            let r: Vec<f64> = (0..n)
                .map(|i| if fixed[i] { 0.0 } else { p.grad[i] + jnu[i] - eta / p.x[i] })
                .collect();
            let (dx, dnu) = factor.solve(&r, &p.ev.c);
            let dz = kkt::bound_multiplier_step(&p.x, &z, eta, &dx);

            let eps = opts.eps_min.max(1.0 - eta);
            let alpha_max = fraction_to_boundary(&p.x, &dx, eps);
            let alpha_z = fraction_to_boundary(&z, &dz, eps);

            let c1 = l1_norm(&p.ev.c);
            let g_dx: f64 = (0..n).map(|i| (p.grad[i] - eta / p.x[i]) * dx[i]).sum();
            if g_dx - rho * c1 >= 0.0 && c1 > 0.0 {
                rho = rho.max(2.0 * g_dx / c1 + 1.0);
            }
            let d_merit = (g_dx - rho * c1).min(0.0);
            let phi0 = merit(p.ev.f, &p.x, &p.ev.c, eta, rho);
            let slack = 10.0 * f64::EPSILON * phi0.abs();

            let mut alpha = alpha_max;
            let mut accepted: Option<(Vec<f64>, f64, bool)> = None;
            for k in 0..=opts.max_backtracks {
                let xt: Vec<f64> = (0..n).map(|i| (p.x[i] + alpha * dx[i]).min(NEVER_CACHE_RATE)).collect();
                if xt.iter().all(|&v| v > 0.0) {
                    let (ft, ct) = value_at(inst, &xt)?;
                    let phit = merit(ft, &xt, &ct, eta, rho);
                    if phit <= phi0 + opts.armijo * alpha * d_merit + slack {
                        accepted = Some((xt, phit, false));
                        break;
                    }
                    if k == 0 && l1_norm(&ct) >= c1 {
                        // second-order corrections against the Maratos effect
                        let mut c_soc: Vec<f64> = (0..m).map(|q| alpha * p.ev.c[q] + ct[q]).collect();
                        let mut c_prev = l1_norm(&ct);
                        for _ in 0..MAX_SOC {
                            let (dx_soc, _) = factor.solve(&r, &c_soc);
                            let a_soc = fraction_to_boundary(&p.x, &dx_soc, eps);
                            let xs: Vec<f64> =
                                (0..n).map(|i| (p.x[i] + a_soc * dx_soc[i]).min(NEVER_CACHE_RATE)).collect();
                            if !xs.iter().all(|&v| v > 0.0) {
                                break;
                            }
                            let (fs, cs) = value_at(inst, &xs)?;
                            let phis = merit(fs, &xs, &cs, eta, rho);
                            if phis <= phi0 + opts.armijo * alpha * d_merit + slack {
                                accepted = Some((xs, phis, true));
                                break;
                            }
                            let c_now = l1_norm(&cs);
                            if c_now > 0.99 * c_prev {
                                break;
                            }
                            c_prev = c_now;
                            for q in 0..m {
                                c_soc[q] = a_soc * c_soc[q] + cs[q];
                            }
                        }
                        if accepted.is_some() {
                            break;
                        }
                    }
                }
                alpha *= opts.backtrack;
            }

            let Some((x_new, phi_new, soc)) = accepted else {
                if restored {
                    return Err(Error::Solver(format!(
                        "line search failed after {} backtracks at eta = {eta:.3e}",
                        opts.max_backtracks
                    )));
                }
                restored = true;
                eta = (10.0 * eta).min(opts.eta0.max(eta));
                log::warn!("line search failed; raising the barrier parameter to {eta:.3e}");
                for i in 0..n {
                    z[i] = safeguard(z[i], p.x[i], eta);
                }
                continue;
            };
            restored = false;
            if alpha < SHORT_STEP {
                damp = if damp == 0.0 { DAMP_START } else { (10.0 * damp).min(DAMP_MAX) };
            } else if alpha == alpha_max {
                damp = if damp > DAMP_START { damp / 10.0 } else { 0.0 };
            }
            for q in 0..m {
                nu[q] += alpha * dnu[q];
            }
            p = Point::new(inst, x_new)?;
            for i in 0..n {
                z[i] = if p.x[i] >= NEVER_CACHE_RATE {
                    eta / p.x[i]
                } else {
                    safeguard(z[i] + alpha_z * dz[i], p.x[i], eta)
                };
            }
            inner += 1;
            iterations += 1;
            log.push(IterateRecord {
                outer,
                inner,
                eta,
                f: p.ev.f,
                c_inf: inf_norm(&p.ev.c),
                alpha,
                alpha_z,
                merit_prev: phi0,
                merit: phi_new,
                rho,
                delta: factor.delta,
                soc,
            });
        }
        eta = barrier_update(eta, opts);
    }
    Ok(not_converged(best, log, iterations, "outer iteration limit reached"))
}

fn safeguard(z: f64, x: f64, eta: f64) -> f64 {
    z.clamp(eta / (KAPPA_SIGMA * x), KAPPA_SIGMA * eta / x)
}

fn not_converged(best: Option<KktState>, log: Vec<IterateRecord>, iterations: usize, msg: &str) -> SolveResult {
    SolveResult {
        state: best.expect("at least one iterate is recorded"),
        log,
        converged: false,
        iterations,
        message: msg.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{CacheTree, ObjectDemand};
    use crate::utility::UtilitySpec;
    use approx::assert_relative_eq;

    #[test]
    fn barrier_update_values() {
        let o = SolverOptions::default();
        assert_relative_eq!(barrier_update(0.1, &o), 0.02, epsilon = 1e-15);
        assert_eq!(barrier_update(1e-9, &o), 1e-9);
        let o2 = SolverOptions {
            kappa: 0.5,
            theta: 2.0,
            ..o
        };
        assert_eq!(barrier_update(1.0, &o2), 0.5);
    }

    #[test]
    fn options_are_validated() {
        assert!(SolverOptions::default().validate().is_ok());
        let bad = SolverOptions {
            kappa: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_single_cache_problem() {
        let tree = CacheTree::single(1.0, 1.0).unwrap();
        let rates = [1.0, 0.6, 0.3];
        let demands = rates
            .iter()
            .enumerate()
            .map(|(i, &l)| ObjectDemand::poisson(i, &[l]).unwrap())
            .collect();
        let inst = ProblemInstance::new(tree, demands, UtilitySpec::proportional()).unwrap();
        let x0 = initial_point(&inst).unwrap();
        let res = solve(&inst, &x0, &SolverOptions::default()).unwrap();
        assert!(res.converged, "{}", res.message);
        let total: f64 = rates.iter().sum();
        for (i, &l) in rates.iter().enumerate() {
            let mu = (total - l) / (1.0 + l);
            assert_relative_eq!(res.state.x.get(i, 0), mu, max_relative = 1e-6);
        }
        assert!(res.state.residuals.primal <= 1e-8);
    }
}
