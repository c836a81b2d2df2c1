//! Stationary distribution of an object model, performance metrics, and the
//! derivatives of the stationary vector in the TTL rates.
//!
//! With `Q = D0 + D1` the stationary row vector solves `pi A = b` where `A`
//! is `Q` with its last column replaced by ones and `b = e_n`. Every TTL rate
//! enters `Q` affinely, so `dA/da` is a constant pattern and `d2A/dadb = 0`:
//!
//! ```text
//! pi_a  = -pi A_a A^-1
//! pi_ab = -(pi_a A_b + pi_b A_a) A^-1
//! ```

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::model::ObjectMarkovModel;
use crate::tree::{CacheId, ObjectDemand};

const REFINE_ABOVE: usize = 5_000;

#[derive(Clone, Debug)]
pub struct SteadyState {
    pub pi: Vec<f64>,
    /// `||pi (D0 + D1)||_inf`
    pub residual: f64,
    /// LU of `A^T`.
    lu: LU<f64, Dyn, Dyn>,
}

pub fn steady_state(model: &ObjectMarkovModel) -> Result<SteadyState> {
    let n = model.n_states();
    let q = model.generator();
    let mut at = DMatrix::zeros(n, n);
    for c in 0..n.saturating_sub(1) {
        for r in 0..n {
            at[(c, r)] = q[(r, c)];
        }
    }
    for r in 0..n {
        at[(n - 1, r)] = 1.0;
    }
    let refine = n > REFINE_ABOVE;
    let at_copy = if refine { Some(at.clone()) } else { None };
    let lu = at.lu();
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mut y = lu.solve(&rhs).ok_or_else(|| {
        Error::Model(format!(
            "singular steady-state system (pivot ratio {:.3e})",
            pivot_ratio(&lu)
        ))
    })?;
    if let Some(m) = at_copy {
        let r = &rhs - &m * &y;
        if let Some(dy) = lu.solve(&r) {
            y += dy;
        }
    }
    let mut pi: Vec<f64> = y.iter().copied().collect();
    for (i, p) in pi.iter_mut().enumerate() {
        if !p.is_finite() {
            return Err(Error::Model(format!("non-finite stationary probability at state {i}")));
        }
        if *p < 0.0 {
            if *p < -1e-9 {
                return Err(Error::Model(format!(
                    "negative stationary probability {p:.3e} at state {i} (pivot ratio {:.3e})",
                    pivot_ratio(&lu)
                )));
            }
            *p = 0.0;
        }
    }
    let piq = DVector::from_column_slice(&pi).transpose() * &q;
    let residual = piq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(SteadyState { pi, residual, lu })
}

fn pivot_ratio(lu: &LU<f64, Dyn, Dyn>) -> f64 {
    let u = lu.u();
    let d: Vec<f64> = (0..u.nrows().min(u.ncols())).map(|i| u[(i, i)].abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

impl SteadyState {
    /// Solve `y A = -w` for a row vector `y`.
    fn solve_neg(&self, w: Vec<f64>) -> Result<Vec<f64>> {
        let rhs = -DVector::from_vec(w);
        let y = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Model("singular steady-state system".into()))?;
        Ok(y.iter().copied().collect())
    }

    /// `pi_a` for the TTL rate of `cache`.
    pub fn derivative(&self, model: &ObjectMarkovModel, cache: CacheId) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.pi.len()];
        add_pattern(model, cache, &self.pi, &mut w);
        self.solve_neg(w)
    }

    /// `pi_ab` given the first derivatives `pi_a`, `pi_b`.
    pub fn second_derivative(
        &self,
        model: &ObjectMarkovModel,
        a: CacheId,
        b: CacheId,
        pi_a: &[f64],
        pi_b: &[f64],
    ) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.pi.len()];
        add_pattern(model, b, pi_a, &mut w);
        add_pattern(model, a, pi_b, &mut w);
        self.solve_neg(w)
    }
}

/// `w += v A_k` where `A_k` is the derivative of `A` in the TTL rate of cache `k`.
fn add_pattern(model: &ObjectMarkovModel, k: CacheId, v: &[f64], w: &mut [f64]) {
    let last = v.len() - 1;
    for &(s, t) in model.expiry_pattern(k) {
        if t != last {
            w[t] += v[s];
        }
        if s != last {
            w[s] -= v[s];
        }
    }
}

/// First and second derivatives of the stationary vector in TTL rates `a`, `b`.
pub fn steady_state_derivatives(
    model: &ObjectMarkovModel,
    ss: &SteadyState,
    a: CacheId,
    b: CacheId,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_cache(model, a)?;
    check_cache(model, b)?;
    let pa = ss.derivative(model, a)?;
    let pb = if a == b { pa.clone() } else { ss.derivative(model, b)? };
    let pab = ss.second_derivative(model, a, b, &pa, &pb)?;
    Ok((pa, pab))
}

fn check_cache(model: &ObjectMarkovModel, k: CacheId) -> Result<()> {
    if k < model.n_caches() {
        Ok(())
    } else {
        Err(Error::param(format!("cache {k} is not in the tree")))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - pi D1 1 / sum_j lambda_ij`.
pub fn system_hit_probability(
    model: &ObjectMarkovModel,
    ss: &SteadyState,
    demand: &ObjectDemand,
) -> Result<f64> {
    let total = demand.total_rate();
    if !(total > 0.0) {
        return Err(Error::param(format!("object {} has zero total rate", demand.object)));
    }
    let miss: f64 = (0..model.n_leaves())
        .map(|j| dot(&ss.pi, model.leaf_miss_rates(j)))
        .sum();
    Ok((1.0 - miss / total).clamp(0.0, 1.0))
}

/// Hit probability of the request stream entering leaf index `leaf`.
pub fn leaf_hit_probability(
    model: &ObjectMarkovModel,
    ss: &SteadyState,
    demand: &ObjectDemand,
    leaf: usize,
) -> Result<f64> {
    let rate = demand.rate(leaf);
    if !(rate > 0.0) || leaf >= model.n_leaves() {
        return Err(Error::UndefinedStream {
            object: demand.object,
            leaf,
        });
    }
    let miss = dot(&ss.pi, model.leaf_miss_rates(leaf));
    Ok((1.0 - miss / rate).clamp(0.0, 1.0))
}

/// Stationary probability that `cache` holds the object.
pub fn expected_occupancy(model: &ObjectMarkovModel, ss: &SteadyState, cache: CacheId) -> Result<f64> {
    check_cache(model, cache)?;
    Ok(model.chi[cache].iter().map(|&s| ss.pi[s]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_object_model, CacheStatus};
    use crate::tree::CacheTree;
    use approx::assert_relative_eq;

    fn single(lambda: f64, theta: f64, phi: f64) -> (ObjectMarkovModel, ObjectDemand) {
        let tree = CacheTree::single(1.0, phi).unwrap();
        let d = ObjectDemand::poisson(0, &[lambda]).unwrap();
        (build_object_model(&tree, &d, &[theta]).unwrap(), d)
    }

    /// Hit probability of a memoryless single cache with fetch delay.
    fn closed_form(l: f64, mu: f64, phi: f64) -> f64 {
        l * phi / (mu * (phi + l) + l * phi)
    }

    #[test]
    fn uniform_three_state_solution() {
        let (m, d) = single(1.0, 1.0, 1.0);
        let ss = steady_state(&m).unwrap();
        for p in &ss.pi {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-14);
        }
        assert!(ss.residual < 1e-12);
        assert_relative_eq!(system_hit_probability(&m, &ss, &d).unwrap(), 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(expected_occupancy(&m, &ss, 0).unwrap(), 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(
            leaf_hit_probability(&m, &ss, &d, 0).unwrap(),
            system_hit_probability(&m, &ss, &d).unwrap()
        );
    }

    #[test]
    fn extreme_ttl_rates() {
        let (m, d) = single(1.0, 1e9, 1.0);
        let ss = steady_state(&m).unwrap();
        let i = m.states.iter().position(|s| s.status[0] == CacheStatus::In).unwrap();
        assert!(ss.pi[i] < 1e-8);
        assert!(expected_occupancy(&m, &ss, 0).unwrap() < 1e-8);
        let (m, d2) = single(1.0, 1e-9, 1.0);
        let ss2 = steady_state(&m).unwrap();
        assert!(system_hit_probability(&m, &ss2, &d2).unwrap() > 1.0 - 1e-8);
        let _ = d;
    }

    #[test]
    fn matches_memoryless_closed_form() {
        for &(l, mu, phi) in &[(2.0, 0.5, 3.0), (0.1, 4.0, 0.25), (1.0, 1.0, 1.0)] {
            let (m, d) = single(l, mu, phi);
            let ss = steady_state(&m).unwrap();
            let p = system_hit_probability(&m, &ss, &d).unwrap();
            assert_relative_eq!(p, closed_form(l, mu, phi), epsilon = 1e-13);
            assert_relative_eq!(expected_occupancy(&m, &ss, 0).unwrap(), p, epsilon = 1e-13);
        }
    }

    #[test]
    fn derivative_matches_closed_form() {
        let (l, mu, phi) = (1.3, 0.7, 2.1);
        let (m, _) = single(l, mu, phi);
        let ss = steady_state(&m).unwrap();
        let pa = ss.derivative(&m, 0).unwrap();
        let dp_model: f64 = m.chi[0].iter().map(|&s| pa[s]).sum();
        // d/dmu of l*phi / (mu (phi + l) + l phi)
        let den = mu * (phi + l) + l * phi;
        let exact = -l * phi * (phi + l) / (den * den);
        assert_relative_eq!(dp_model, exact, max_relative = 1e-12);
        assert!(pa.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn zero_rate_leaf_is_undefined() {
        let tree = CacheTree::binary(1.0, 1.0).unwrap();
        let d = ObjectDemand::poisson(4, &[1.0, 0.0]).unwrap();
        let m = build_object_model(&tree, &d, &[1.0; 3]).unwrap();
        let ss = steady_state(&m).unwrap();
        assert!(matches!(
            leaf_hit_probability(&m, &ss, &d, 1),
            Err(Error::UndefinedStream { object: 4, leaf: 1 })
        ));
        assert!(expected_occupancy(&m, &ss, 3).is_err());
    }
}
