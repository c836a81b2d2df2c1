//! Hierarchy utility objective and expected-occupancy constraints with their
//! analytic first and second derivatives in the per-object TTL rates.
//!
//! Objects are independent given their own TTL rates, so every quantity is
//! assembled from per-object blocks and the Hessians are block diagonal.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_object_model_with, ModelOptions, ObjectMarkovModel};
use crate::steady::{dot, steady_state, SteadyState};
use crate::tree::{CacheTree, ObjectDemand};
use crate::utility::UtilitySpec;

/// Flat TTL rate vector, object-major and cache-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct TtlConfig {
    n_objects: usize,
    n_caches: usize,
    x: Vec<f64>,
}

impl TtlConfig {
    pub fn new(n_objects: usize, n_caches: usize, x: Vec<f64>) -> Result<Self> {
        if x.len() != n_objects * n_caches {
            return Err(Error::param(format!(
                "TTL vector has {} entries, expected {}",
                x.len(),
                n_objects * n_caches
            )));
        }
        if let Some(i) = x.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::param(format!("TTL rate at position {i} must be positive")));
        }
        Ok(Self {
            n_objects,
            n_caches,
            x,
        })
    }

    pub fn uniform(n_objects: usize, n_caches: usize, rate: f64) -> Result<Self> {
        Self::new(n_objects, n_caches, vec![rate; n_objects * n_caches])
    }

    pub fn index(&self, object: usize, cache: usize) -> usize {
        object * self.n_caches + cache
    }

    pub fn position(&self, flat: usize) -> (usize, usize) {
        (flat / self.n_caches, flat % self.n_caches)
    }

    pub fn get(&self, object: usize, cache: usize) -> f64 {
        self.x[self.index(object, cache)]
    }

    pub fn set(&mut self, object: usize, cache: usize, rate: f64) {
        let i = self.index(object, cache);
        self.x[i] = rate;
    }

    pub fn object(&self, object: usize) -> &[f64] {
        &self.x[object * self.n_caches..(object + 1) * self.n_caches]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.x
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_caches(&self) -> usize {
        self.n_caches
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weighting {
    /// Each leaf stream weighted by its request rate.
    Rate,
    /// Each object weighted by its trace request count, split over leaves by rate.
    RequestCount(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub tree: CacheTree,
    pub demands: Vec<ObjectDemand>,
    pub utility: UtilitySpec,
    pub weighting: Weighting,
    pub model: ModelOptions,
}

impl ProblemInstance {
    pub fn new(tree: CacheTree, demands: Vec<ObjectDemand>, utility: UtilitySpec) -> Result<Self> {
        utility.validate()?;
        if demands.is_empty() {
            return Err(Error::param("problem has no objects"));
        }
        for d in &demands {
            d.validate_for(&tree)?;
            if !(d.total_rate() > 0.0) {
                return Err(Error::param(format!("object {} has zero total rate", d.object)));
            }
        }
        let n = demands.len() as f64;
        for node in tree.nodes() {
            if node.capacity >= n {
                log::warn!(
                    "cache {} can hold all {} objects; the capacity constraint is saturated",
                    node.id,
                    demands.len()
                );
            }
        }
        Ok(Self {
            tree,
            demands,
            utility,
            weighting: Weighting::Rate,
            model: ModelOptions::default(),
        })
    }

    pub fn with_request_counts(mut self, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != self.demands.len() || counts.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::param("one non-negative request count per object is required"));
        }
        self.weighting = Weighting::RequestCount(counts);
        Ok(self)
    }

    pub fn n_objects(&self) -> usize {
        self.demands.len()
    }

    pub fn n_caches(&self) -> usize {
        self.tree.n_caches()
    }

    pub fn n_vars(&self) -> usize {
        self.n_objects() * self.n_caches()
    }

    /// Weight of the utility of leaf stream `j` of object `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let d = &self.demands[i];
        match &self.weighting {
            Weighting::Rate => d.rate(j),
            Weighting::RequestCount(w) => w[i] * d.rate(j) / d.total_rate(),
        }
    }

    fn check_config(&self, x: &TtlConfig) -> Result<()> {
        if x.n_objects() != self.n_objects() || x.n_caches() != self.n_caches() {
            return Err(Error::param(format!(
                "TTL config is {}x{}, problem is {}x{}",
                x.n_objects(),
                x.n_caches(),
                self.n_objects(),
                self.n_caches()
            )));
        }
        Ok(())
    }

    pub fn object_model(&self, i: usize, rates: &[f64]) -> Result<ObjectMarkovModel> {
        build_object_model_with(&self.tree, &self.demands[i], rates, self.model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    First,
    Second,
}

/// Everything the solver needs from one object.
#[derive(Clone, Debug)]
pub struct ObjectEval {
    pub leaf_hit: Vec<Option<f64>>,
    pub system_hit: f64,
    pub occupancy: Vec<f64>,
    /// `sum_j w_ij psi(P_ij)` with the smoothed log.
    pub utility: f64,
    /// Same without smoothing.
    pub utility_exact: f64,
    /// Gradient of `-utility_exact` in this object's TTL rates.
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
    /// `occ_jac[(k, a)] = d E[O^k] / d theta_a`.
    pub occ_jac: DMatrix<f64>,
    /// Per cache `k`, Hessian of `E[O^k]`.
    pub occ_hess: Vec<DMatrix<f64>>,
}

pub fn evaluate_object(inst: &ProblemInstance, rates: &[f64], i: usize, order: Order) -> Result<ObjectEval> {
    evaluate_object_inner(inst, rates, i, order).map_err(|e| e.in_object(inst.demands[i].object))
}

fn evaluate_object_inner(inst: &ProblemInstance, rates: &[f64], i: usize, order: Order) -> Result<ObjectEval> {
    let n_c = inst.n_caches();
    let n_l = inst.tree.n_leaves();
    let demand = &inst.demands[i];
    let model = inst.object_model(i, rates)?;
    let ss = steady_state(&model)?;
    let u = &inst.utility;

    let mut leaf_hit = vec![None; n_l];
    let mut utility = 0.0;
    let mut utility_exact = 0.0;
    let mut miss_total = 0.0;
    for j in 0..n_l {
        let lam = demand.rate(j);
        if lam <= 0.0 {
            continue;
        }
        let miss = dot(&ss.pi, model.leaf_miss_rates(j));
        miss_total += miss;
        let p = (1.0 - miss / lam).clamp(0.0, 1.0);
        leaf_hit[j] = Some(p);
        let w = inst.weight(i, j);
        utility += w * u.value(p)?;
        utility_exact += w * u.value_exact(p)?;
    }
    let system_hit = (1.0 - miss_total / demand.total_rate()).clamp(0.0, 1.0);
    let occupancy: Vec<f64> = model
        .chi
        .iter()
        .map(|set| set.iter().map(|&s| ss.pi[s]).sum())
        .collect();

    let mut ev = ObjectEval {
        leaf_hit,
        system_hit,
        occupancy,
        utility,
        utility_exact,
        grad: Vec::new(),
        hess: DMatrix::zeros(0, 0),
        occ_jac: DMatrix::zeros(0, 0),
        occ_hess: Vec::new(),
    };
    if order == Order::Value {
        return Ok(ev);
    }

    let d_pi: Vec<Vec<f64>> = (0..n_c)
        .map(|a| ss.derivative(&model, a))
        .collect::<Result<_>>()?;
    // dm[a][j] = pi_a . D_j 1
    let dm: Vec<Vec<f64>> = d_pi
        .iter()
        .map(|pa| (0..n_l).map(|j| dot(pa, model.leaf_miss_rates(j))).collect())
        .collect();
    let psi_d: Vec<Option<(f64, f64)>> = ev
        .leaf_hit
        .iter()
        .map(|p| p.map(|p| u.derivatives(p)).transpose())
        .collect::<Result<_>>()?;

    ev.grad = (0..n_c)
        .map(|a| {
            (0..n_l)
                .filter_map(|j| psi_d[j].map(|(d1, _)| inst.weight(i, j) / demand.rate(j) * d1 * dm[a][j]))
                .sum()
        })
        .collect();
    ev.occ_jac = DMatrix::from_fn(n_c, n_c, |k, a| chi_sum(&model, k, &d_pi[a]));
    if order == Order::First {
        return Ok(ev);
    }

    let mut hess = DMatrix::zeros(n_c, n_c);
    let mut occ_hess = vec![DMatrix::zeros(n_c, n_c); n_c];
    for a in 0..n_c {
        for b in a..n_c {
            let pab = ss.second_derivative(&model, a, b, &d_pi[a], &d_pi[b])?;
            let mut h = 0.0;
            for j in 0..n_l {
                let Some((d1, d2)) = psi_d[j] else { continue };
                let lam = demand.rate(j);
                let m = model.leaf_miss_rates(j);
                h += inst.weight(i, j) / lam * (d1 * dot(&pab, m) - d2 / lam * dm[a][j] * dm[b][j]);
            }
            hess[(a, b)] = h;
            hess[(b, a)] = h;
            for (k, oh) in occ_hess.iter_mut().enumerate() {
                let v = chi_sum(&model, k, &pab);
                oh[(a, b)] = v;
                oh[(b, a)] = v;
            }
        }
    }
    ev.hess = hess;
    ev.occ_hess = occ_hess;
    Ok(ev)
}

fn chi_sum(model: &ObjectMarkovModel, k: usize, v: &[f64]) -> f64 {
    model.chi[k].iter().map(|&s| v[s]).sum()
}

/// Whole-problem evaluation in solver form (minimization sign).
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objects: Vec<ObjectEval>,
    /// `-sum_i utility_exact`.
    pub f: f64,
    /// `c_k = sum_i E[O_i^k] - B_k`.
    pub c: Vec<f64>,
}

impl Evaluation {
    pub fn grad(&self) -> Vec<f64> {
        self.objects.iter().flat_map(|o| o.grad.iter().copied()).collect()
    }

    /// Dense `n x m` Jacobian, column `k` is the gradient of `c_k`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n_c = self.c.len();
        let n = self.objects.len() * n_c;
        let mut j = DMatrix::zeros(n, n_c);
        for (i, o) in self.objects.iter().enumerate() {
            for a in 0..n_c {
                for k in 0..n_c {
                    j[(i * n_c + a, k)] = o.occ_jac[(k, a)];
                }
            }
        }
        j
    }
}

pub fn evaluate(inst: &ProblemInstance, x: &TtlConfig, order: Order) -> Result<Evaluation> {
    inst.check_config(x)?;
    let objects: Vec<ObjectEval> = (0..inst.n_objects())
        .into_par_iter()
        .map(|i| evaluate_object(inst, x.object(i), i, order))
        .collect::<Result<_>>()?;
    let f = -objects.iter().map(|o| o.utility_exact).sum::<f64>();
    let c = (0..inst.n_caches())
        .map(|k| objects.iter().map(|o| o.occupancy[k]).sum::<f64>() - inst.tree.capacity(k))
        .collect();
    Ok(Evaluation { objects, f, c })
}

/// Negative aggregate utility, with the smoothed log near zero.
pub fn objective_value(inst: &ProblemInstance, x: &TtlConfig) -> Result<f64> {
    let ev = evaluate(inst, x, Order::Value)?;
    Ok(-ev.objects.iter().map(|o| o.utility).sum::<f64>())
}

/// Negative aggregate utility with the exact utility function.
pub fn objective_value_exact(inst: &ProblemInstance, x: &TtlConfig) -> Result<f64> {
    Ok(evaluate(inst, x, Order::Value)?.f)
}

pub fn objective_gradient_hessian(
    inst: &ProblemInstance,
    x: &TtlConfig,
    object: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    inst.check_config(x)?;
    if object >= inst.n_objects() {
        return Err(Error::param(format!("no object {object}")));
    }
    let ev = evaluate_object(inst, x.object(object), object, Order::Second)?;
    Ok((ev.grad, ev.hess))
}

#[derive(Clone, Debug)]
pub struct ConstraintEval {
    pub values: Vec<f64>,
    /// `n x m`
    pub jacobian: DMatrix<f64>,
    /// `hessians[i][k]`: block of constraint `k` for object `i`.
    pub hessians: Vec<Vec<DMatrix<f64>>>,
}

pub fn constraint_values_and_derivatives(inst: &ProblemInstance, x: &TtlConfig) -> Result<ConstraintEval> {
    let ev = evaluate(inst, x, Order::Second)?;
    let jacobian = ev.jacobian();
    Ok(ConstraintEval {
        values: ev.c,
        jacobian,
        hessians: ev.objects.into_iter().map(|o| o.occ_hess).collect(),
    })
}

/// Steady state of one object under the given TTL rates, for reporting.
pub fn object_steady_state(
    inst: &ProblemInstance,
    x: &TtlConfig,
    object: usize,
) -> Result<(ObjectMarkovModel, SteadyState)> {
    let model = inst.object_model(object, x.object(object))?;
    let ss = steady_state(&model)?;
    Ok((model, ss))
}
