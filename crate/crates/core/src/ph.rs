//! Phase-type distributions for inter-request times, TTLs and fetch delays.
//!
//! A distribution is an initial probability vector over transient phases and
//! a sub-generator matrix. Exponential and Erlang are special cases of the
//! general form, so the model builder and the simulator treat all of them the
//! same way.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Exponential,
    Erlang,
    General,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDist {
    kind: PhaseKind,
    init: Vec<f64>,
    /// Row-major `phases x phases` sub-generator.
    subgen: Vec<f64>,
    /// Absorption rate out of each phase, `-subgen * 1`.
    exit: Vec<f64>,
    mean: f64,
}

impl PhaseDist {
    pub fn exponential(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            kind: PhaseKind::Exponential,
            init: vec![1.0],
            subgen: vec![-rate],
            exit: vec![rate],
            mean: 1.0 / rate,
        })
    }

    /// `k` sequential phases, each left at `rate`.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("erlang order must be at least 1"));
        }
        check_rate(rate)?;
        if k > u8::MAX as usize {
            return Err(Error::param(format!("erlang order {k} exceeds 255 phases")));
        }
        let mut subgen = vec![0.0; k * k];
        for p in 0..k {
            subgen[p * k + p] = -rate;
            if p + 1 < k {
                subgen[p * k + p + 1] = rate;
            }
        }
        let mut init = vec![0.0; k];
        init[0] = 1.0;
        let mut exit = vec![0.0; k];
        exit[k - 1] = rate;
        Ok(Self {
            kind: if k == 1 {
                PhaseKind::Exponential
            } else {
                PhaseKind::Erlang
            },
            init,
            subgen,
            exit,
            mean: k as f64 / rate,
        })
    }

    /// Arbitrary phase-type distribution. `subgen` is given row by row.
    pub fn general(init: Vec<f64>, subgen: Vec<Vec<f64>>) -> Result<Self> {
        let n = init.len();
        if n == 0 || subgen.len() != n || subgen.iter().any(|r| r.len() != n) {
            return Err(Error::param("sub-generator must be square and match the initial vector"));
        }
        if n > u8::MAX as usize {
            return Err(Error::param("at most 255 phases are supported"));
        }
        if init.iter().any(|&v| !(v >= 0.0)) || (init.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(Error::param("initial vector must be a probability vector"));
        }
        let mut flat = Vec::with_capacity(n * n);
        let mut exit = Vec::with_capacity(n);
        let mut any_exit = false;
        for (p, row) in subgen.iter().enumerate() {
            let mut sum = 0.0;
            for (q, &v) in row.iter().enumerate() {
                if !v.is_finite() || (p != q && v < 0.0) {
                    return Err(Error::param(format!("invalid sub-generator entry ({p},{q})")));
                }
                sum += v;
                flat.push(v);
            }
            if sum > 1e-12 * row[p].abs().max(1.0) {
                return Err(Error::param(format!("sub-generator row {p} has positive sum")));
            }
            let out = (-sum).max(0.0);
            any_exit |= out > 0.0;
            exit.push(out);
        }
        if !any_exit {
            return Err(Error::param("sub-generator has no absorbing row"));
        }
        let mean = ph_mean(&init, &flat, n)?;
        Ok(Self {
            kind: PhaseKind::General,
            init,
            subgen: flat,
            exit,
            mean,
        })
    }

    pub fn kind(&self) -> PhaseKind {
        self.kind
    }

    pub fn phases(&self) -> usize {
        self.init.len()
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn subgen(&self, from: usize, to: usize) -> f64 {
        self.subgen[from * self.phases() + to]
    }

    pub fn exit_rate(&self, phase: usize) -> f64 {
        self.exit[phase]
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Long-run event rate of the renewal process with these inter-event times.
    pub fn rate(&self) -> f64 {
        1.0 / self.mean
    }

    pub fn is_exponential(&self) -> bool {
        self.phases() == 1
    }

    pub fn squared_cv(&self) -> f64 {
        let second = self.second_moment();
        second / (self.mean * self.mean) - 1.0
    }

    fn second_moment(&self) -> f64 {
        // E[X^2] = 2 a S^-2 1
        let n = self.phases();
        let s = DMatrix::from_row_slice(n, n, &self.subgen);
        let lu = s.lu();
        let ones = DVector::from_element(n, 1.0);
        let y = lu.solve(&ones).expect("validated sub-generator");
        let y2 = lu.solve(&y).expect("validated sub-generator");
        2.0 * DVector::from_column_slice(&self.init).dot(&y2)
    }

    /// Draw one variate by walking the phases with exponential sojourns.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.phases() == 1 {
            let e: f64 = Exp1.sample(rng);
            return e / self.exit[0];
        }
        let n = self.phases();
        let mut phase = pick(rng, &self.init);
        let mut t = 0.0;
        loop {
            let out = -self.subgen[phase * n + phase];
            let e: f64 = Exp1.sample(rng);
            t += e / out;
            let u = rng.random::<f64>() * out;
            let mut acc = self.exit[phase];
            if u < acc {
                return t;
            }
            let mut next = None;
            for q in 0..n {
                if q == phase {
                    continue;
                }
                acc += self.subgen[phase * n + q];
                if u < acc {
                    next = Some(q);
                    break;
                }
            }
            match next {
                Some(q) => phase = q,
                // rounding past the last bucket
                None => return t,
            }
        }
    }
}

/// `-init * subgen^-1 * 1`.
pub fn mean(d: &PhaseDist) -> f64 {
    d.mean()
}

fn ph_mean(init: &[f64], subgen: &[f64], n: usize) -> Result<f64> {
    let s = DMatrix::from_row_slice(n, n, subgen);
    let ones = DVector::from_element(n, 1.0);
    let y = s
        .lu()
        .solve(&ones)
        .ok_or_else(|| Error::Model("singular sub-generator".into()))?;
    let m = -DVector::from_column_slice(init).dot(&y);
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::Model(format!("non-positive mean {m}")));
    }
    Ok(m)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("rate must be positive and finite, got {rate}")))
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Scenario-file form of a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl PhaseSpec {
    pub fn exponential(rate: f64) -> Self {
        Self {
            kind: PhaseKind::Exponential,
            rate,
            k: None,
        }
    }

    pub fn build(&self) -> Result<PhaseDist> {
        match self.kind {
            PhaseKind::Exponential => PhaseDist::exponential(self.rate),
            PhaseKind::Erlang => PhaseDist::erlang(
                self.k.ok_or_else(|| Error::Config("erlang distribution needs `k`".into()))?,
                self.rate,
            ),
            PhaseKind::General => Err(Error::Config(
                "general phase-type distributions cannot be given in a scenario file".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exponential_means() {
        assert_relative_eq!(PhaseDist::exponential(2.0).unwrap().mean(), 0.5);
        assert_relative_eq!(PhaseDist::exponential(1.0).unwrap().mean(), 1.0);
        assert_relative_eq!(mean(&PhaseDist::exponential(4.0).unwrap()), 0.25);
        assert!(matches!(PhaseDist::exponential(0.0), Err(Error::Parameter(_))));
        assert!(PhaseDist::exponential(-1.0).is_err());
        assert!(PhaseDist::exponential(f64::NAN).is_err());
    }

    #[test]
    fn erlang_moments() {
        let e1 = PhaseDist::erlang(1, 3.0).unwrap();
        assert_eq!(e1, PhaseDist::exponential(3.0).unwrap());
        let e2 = PhaseDist::erlang(2, 2.0).unwrap();
        assert_relative_eq!(e2.mean(), 1.0);
        assert_relative_eq!(e2.squared_cv(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(PhaseDist::erlang(4, 2.0).unwrap().mean(), 2.0);
        assert!(PhaseDist::erlang(0, 1.0).is_err());
    }

    #[test]
    fn erlang_mean_is_exact() {
        for k in 1..=16 {
            for &r in &[0.1, 1.0, 10.0] {
                let d = PhaseDist::erlang(k, r).unwrap();
                assert_eq!(d.mean(), k as f64 / r);
            }
        }
    }

    #[test]
    fn general_sequential_mean() {
        let d = PhaseDist::general(vec![1.0, 0.0], vec![vec![-1.0, 1.0], vec![0.0, -2.0]]).unwrap();
        assert_relative_eq!(d.mean(), 1.5, epsilon = 1e-12);
        assert_eq!(d.kind(), PhaseKind::General);
    }

    #[test]
    fn general_rejects_bad_input() {
        assert!(PhaseDist::general(vec![0.5, 0.4], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]).is_err());
        assert!(PhaseDist::general(vec![1.0, 0.0], vec![vec![-1.0, 2.0], vec![0.0, -1.0]]).is_err());
        assert!(PhaseDist::general(vec![1.0, 0.0], vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).is_err());
        assert!(PhaseDist::general(vec![1.0], vec![vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn sample_means_within_three_standard_errors() {
        let dists = vec![
            PhaseDist::exponential(2.0).unwrap(),
            PhaseDist::erlang(3, 1.5).unwrap(),
            PhaseDist::general(
                vec![0.3, 0.7],
                vec![vec![-2.0, 1.0], vec![0.5, -1.0]],
            )
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        for d in dists {
            let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - d.mean()).abs() < 3.0 * se, "{:?}: {m} vs {}", d.kind(), d.mean());
        }
    }

    #[test]
    fn spec_round_trip() {
        let s: PhaseSpec = serde_json::from_str(r#"{"kind":"erlang","rate":2.0,"k":2}"#).unwrap();
        assert_relative_eq!(s.build().unwrap().mean(), 1.0);
        let e: PhaseSpec = serde_json::from_str(r#"{"kind":"exponential","rate":4.0}"#).unwrap();
        assert_relative_eq!(e.build().unwrap().mean(), 0.25);
        let bad: PhaseSpec = serde_json::from_str(r#"{"kind":"erlang","rate":2.0}"#).unwrap();
        assert!(bad.build().is_err());
    }
}
