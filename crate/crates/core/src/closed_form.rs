//! Single memoryless cache: hit probability, its inverse, and the optimal
//! hit probabilities and TTL rates under an alpha-fair utility.

use crate::error::{Error, Result};
use crate::utility::UtilitySpec;

/// Hit probability cap used when an object saturates.
pub const SATURATED_HIT: f64 = 1.0 - 1e-9;

const MAX_BISECTIONS: usize = 200;
const SUM_TOL: f64 = 1e-9;

/// `lambda phi / (mu (phi + lambda) + lambda phi)`.
pub fn single_cache_hit(lambda: f64, mu: f64, phi: f64) -> f64 {
    lambda * phi / (mu * (phi + lambda) + lambda * phi)
}

/// TTL rate that gives hit probability `p`; `0` for `p = 1`, infinite for `p = 0`.
pub fn single_cache_ttl_for_hit(lambda: f64, phi: f64, p: f64) -> f64 {
    lambda * phi * (1.0 / p - 1.0) / (phi + lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub hit: Vec<f64>,
    pub ttl_rate: Vec<f64>,
    /// Multiplier of the capacity constraint; `None` for the linear utility.
    pub beta: Option<f64>,
    /// Objects whose hit probability was capped.
    pub saturated: Vec<usize>,
}

fn check_inputs(rates: &[f64], phi: f64, capacity: f64) -> Result<()> {
    if rates.is_empty() || rates.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::param("all request rates must be positive"));
    }
    if !(phi > 0.0) {
        return Err(Error::param("fetch rate must be positive"));
    }
    if !(capacity > 0.0) || capacity >= rates.len() as f64 {
        return Err(Error::param(format!(
            "capacity {capacity} must lie in (0, {}) for a non-trivial optimum",
            rates.len()
        )));
    }
    Ok(())
}

/// Interior optimum `P_i = psi'^-1(beta / lambda_i)` with `sum P_i = B`.
///
/// Fails with a saturation error when some `P_i` would exceed one; use
/// [`single_cache_closed_form_capped`] then. The linear utility has no
/// interior optimum and returns the boundary solution caching the hottest
/// objects.
pub fn single_cache_closed_form(rates: &[f64], phi: f64, capacity: f64, u: &UtilitySpec) -> Result<ClosedForm> {
    check_inputs(rates, phi, capacity)?;
    u.validate()?;
    if u.alpha == 0.0 {
        return Ok(top_b(rates, phi, capacity));
    }
    let (hit, beta) = if u.alpha == 1.0 {
        let total: f64 = rates.iter().sum();
        (rates.iter().map(|l| l * capacity / total).collect::<Vec<_>>(), total / capacity)
    } else {
        bisect(rates, capacity, u, f64::INFINITY)?
    };
    if let Some(i) = hit.iter().position(|&p| p > 1.0) {
        return Err(Error::Saturation(format!(
            "object {i} has optimal hit probability {:.6} > 1; use the capped closed form",
            hit[i]
        )));
    }
    Ok(finish(rates, phi, hit, Some(beta), Vec::new()))
}

/// Like [`single_cache_closed_form`], but objects whose interior optimum
/// exceeds one are pinned at [`SATURATED_HIT`] and the remaining capacity is
/// shared among the others.
pub fn single_cache_closed_form_capped(
    rates: &[f64],
    phi: f64,
    capacity: f64,
    u: &UtilitySpec,
) -> Result<ClosedForm> {
    check_inputs(rates, phi, capacity)?;
    u.validate()?;
    if u.alpha == 0.0 {
        return Ok(top_b(rates, phi, capacity));
    }
    if u.alpha != 1.0 {
        let (hit, beta) = bisect(rates, capacity, u, SATURATED_HIT)?;
        let saturated = (0..rates.len()).filter(|&i| hit[i] >= SATURATED_HIT).collect();
        return Ok(finish(rates, phi, hit, Some(beta), saturated));
    }
    let n = rates.len();
    let mut capped = vec![false; n];
    loop {
        let free: f64 = capacity - SATURATED_HIT * capped.iter().filter(|&&c| c).count() as f64;
        let total: f64 = (0..n).filter(|&i| !capped[i]).map(|i| rates[i]).sum();
        let beta = total / free;
        let mut changed = false;
        for i in 0..n {
            if !capped[i] && rates[i] / beta > SATURATED_HIT {
                capped[i] = true;
                changed = true;
            }
        }
        if !changed {
            let hit = (0..n)
                .map(|i| if capped[i] { SATURATED_HIT } else { rates[i] / beta })
                .collect();
            let saturated = (0..n).filter(|&i| capped[i]).collect();
            return Ok(finish(rates, phi, hit, Some(beta), saturated));
        }
    }
}

fn finish(rates: &[f64], phi: f64, hit: Vec<f64>, beta: Option<f64>, saturated: Vec<usize>) -> ClosedForm {
    let ttl_rate = rates
        .iter()
        .zip(&hit)
        .map(|(&l, &p)| single_cache_ttl_for_hit(l, phi, p))
        .collect();
    ClosedForm {
        hit,
        ttl_rate,
        beta,
        saturated,
    }
}

/// Linear utility: fill the cache with the hottest objects, ties by index.
fn top_b(rates: &[f64], phi: f64, capacity: f64) -> ClosedForm {
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]).then(a.cmp(&b)));
    let mut hit = vec![0.0; rates.len()];
    let mut left = capacity;
    for &i in &order {
        let p = left.min(1.0);
        if p <= 0.0 {
            break;
        }
        hit[i] = p;
        left -= p;
    }
    let saturated = order.iter().copied().filter(|&i| hit[i] == 1.0).collect();
    finish(rates, phi, hit, None, saturated)
}

/// Bisection on `log beta` for `sum_i min(cap, psi'^-1(beta / lambda_i)) = B`.
fn bisect(rates: &[f64], capacity: f64, u: &UtilitySpec, cap: f64) -> Result<(Vec<f64>, f64)> {
    let lmin = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = rates.iter().cloned().fold(0.0, f64::max);
    let (d_hi, _) = u.derivatives(1.0 - 1e-9)?;
    let (d_lo, _) = u.derivatives(1e-9)?;
    let hits = |beta: f64| -> Result<Vec<f64>> {
        rates
            .iter()
            .map(|&l| u.inverse_derivative(beta / l).map(|p| p.min(cap)))
            .collect()
    };
    let mut lo = (d_hi * lmin).ln();
    let mut hi = (d_lo * lmax).ln();
    // The sum decreases in beta.
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let p = hits(mid.exp())?;
        let s: f64 = p.iter().sum();
        if (s - capacity).abs() < SUM_TOL {
            return Ok((p, mid.exp()));
        }
        if s > capacity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Solver(format!(
        "bisection for the capacity multiplier did not reach {SUM_TOL:e} in {MAX_BISECTIONS} steps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn proportional_split() {
        let cf = single_cache_closed_form(&[2.0, 1.0, 1.0], 1.0, 1.0, &UtilitySpec::proportional()).unwrap();
        assert_eq!(cf.hit, vec![0.5, 0.25, 0.25]);
        for (i, &l) in [2.0, 1.0, 1.0].iter().enumerate() {
            assert_relative_eq!(single_cache_hit(l, cf.ttl_rate[i], 1.0), cf.hit[i], epsilon = 1e-12);
        }
        // mu_1 = (phi sum/B - lambda_1 phi) / (phi + lambda_1)
        assert_relative_eq!(cf.ttl_rate[0], (4.0 - 2.0) / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn saturation_is_reported_and_capped() {
        let rates = [10.0, 1.0, 1.0, 1.0];
        let u = UtilitySpec::proportional();
        assert!(matches!(
            single_cache_closed_form(&rates, 1.0, 2.0, &u),
            Err(Error::Saturation(_))
        ));
        let cf = single_cache_closed_form_capped(&rates, 1.0, 2.0, &u).unwrap();
        assert_eq!(cf.saturated, vec![0]);
        assert_relative_eq!(cf.hit.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(cf.hit[1], (2.0 - SATURATED_HIT) / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn general_alpha_bisection() {
        let rates = [1.0, 0.5, 0.3, 0.2, 0.1];
        for &a in &[0.5, 2.0, 3.0] {
            let u = UtilitySpec::new(a).unwrap();
            let cf = single_cache_closed_form_capped(&rates, 2.0, 1.5, &u).unwrap();
            assert!((cf.hit.iter().sum::<f64>() - 1.5).abs() < 1e-9);
            let beta = cf.beta.unwrap();
            for (i, &l) in rates.iter().enumerate() {
                if cf.hit[i] < SATURATED_HIT {
                    let (d1, _) = u.derivatives(cf.hit[i]).unwrap();
                    assert_relative_eq!(l * d1, beta, max_relative = 1e-6);
                }
                assert_relative_eq!(single_cache_hit(l, cf.ttl_rate[i], 2.0), cf.hit[i], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn linear_utility_caches_the_hottest() {
        let cf = single_cache_closed_form(&[0.2, 1.0, 0.5, 0.7], 1.0, 2.5, &UtilitySpec::offloading()).unwrap();
        assert_eq!(cf.hit, vec![0.0, 1.0, 0.5, 1.0]);
        assert_eq!(cf.ttl_rate[1], 0.0);
        assert!(cf.ttl_rate[0].is_infinite());
    }

    #[test]
    fn infeasible_capacity() {
        let u = UtilitySpec::proportional();
        assert!(single_cache_closed_form(&[1.0, 1.0], 1.0, 2.0, &u).is_err());
        assert!(single_cache_closed_form(&[1.0, 0.0], 1.0, 1.0, &u).is_err());
    }
}
