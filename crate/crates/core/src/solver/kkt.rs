//! Primal-dual Newton system with inertia correction.
//!
//! The bound multipliers are eliminated first,
//! `dz = eta/x - z - (z/x) dx`, leaving
//!
//! ```text
//! [ W   J ] [dx]     [ r ]
//! [ J^T -dc] [dnu] = -[ c ]      W = H + X^-1 Z + delta I,  r = grad f + J nu - eta/x
//! ```
//!
//! `W` is block diagonal (one block per object), so it is inverted blockwise
//! and the multiplier step comes from the small Schur complement
//! `S = J^T W^-1 J + dc I`. The matrix has the inertia needed for a descent
//! direction exactly when `S` and `W` have the same number of negative
//! eigenvalues and neither has a zero eigenvalue.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const DELTA_START: f64 = 1e-8;
const DELTA_MAX: f64 = 1e20;
const DUAL_REG: f64 = 1e-8;
const ZERO_EIG: f64 = 1e-14;
/// Relative eigenvalue floor of a modified block.
const MODIFY_FLOOR: f64 = 1e-12;

/// `W^-1 = D V diag(inv_vals) V^T D` where `V` diagonalizes `D W D`.
struct Block {
    offset: usize,
    scale: DVector<f64>,
    vecs: DMatrix<f64>,
    inv_vals: DVector<f64>,
}

impl Block {
    fn apply_inv(&self, v: &[f64]) -> Vec<f64> {
        let n = self.inv_vals.len();
        let v = DVector::from_column_slice(&v[self.offset..self.offset + n]).component_mul(&self.scale);
        let t = self.vecs.tr_mul(&v).component_mul(&self.inv_vals);
        (&self.vecs * t).component_mul(&self.scale).iter().copied().collect()
    }
}

/// Symmetric diagonal equilibration `D W D` with unit diagonal where
/// possible. Bound terms `z/x` of tiny rates would otherwise swamp the
/// eigenvalues of the other variables in the block. Congruence keeps the
/// inertia.
fn equilibrate(mut w: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = w.nrows();
    let big = (0..n).fold(0.0f64, |m, a| m.max(w[(a, a)].abs()));
    let d = DVector::from_fn(n, |a, _| {
        let v = w[(a, a)].abs().max(1e-30 * big);
        if v > 0.0 {
            1.0 / v.sqrt()
        } else {
            1.0
        }
    });
    for a in 0..n {
        for b in 0..n {
            w[(a, b)] *= d[a] * d[b];
        }
    }
    (w, d)
}

enum SchurOutcome {
    Ok(DMatrix<f64>, DVector<f64>, DMatrix<f64>),
    Singular,
    WrongInertia,
}

/// Factorized reduced KKT matrix, reusable for several right-hand sides.
pub struct KktFactor {
    blocks: Vec<Block>,
    j: DMatrix<f64>,
    winv_j: DMatrix<f64>,
    s_vecs: DMatrix<f64>,
    s_inv_vals: DVector<f64>,
    /// Primal regularization that was needed.
    pub delta: f64,
    /// Dual regularization that was needed.
    pub delta_c: f64,
}

struct Factored {
    block: Block,
    neg: usize,
    zero: usize,
}

fn factor_block(h: &DMatrix<f64>, sigma: &[f64], offset: usize, delta: f64) -> Factored {
    let n = h.nrows();
    let mut w = h.clone();
    for a in 0..n {
        w[(a, a)] += sigma[offset + a] + delta;
    }
    let (w, d) = equilibrate(w);
    let eig = SymmetricEigen::new(w);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut inv = DVector::zeros(n);
    let mut neg = 0;
    let mut zero = 0;
    for (a, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() <= ZERO_EIG * scale {
            zero += 1;
        } else {
            if l < 0.0 {
                neg += 1;
            }
            inv[a] = 1.0 / l;
        }
    }
    Factored {
        block: Block {
            offset,
            scale: d,
            vecs: eig.eigenvectors,
            inv_vals: inv,
        },
        neg,
        zero,
    }
}

/// Like `factor_block` but with every eigenvalue of the equilibrated block
/// replaced by `max(|l|, MODIFY_FLOOR * scale)`; returns the largest change
/// made, in equilibrated units.
fn factor_block_modified(h: &DMatrix<f64>, sigma: &[f64], offset: usize) -> (Factored, f64) {
    let n = h.nrows();
    let mut w = h.clone();
    for a in 0..n {
        w[(a, a)] += sigma[offset + a];
    }
    let (w, d) = equilibrate(w);
    let eig = SymmetricEigen::new(w);
    let scale = eig.eigenvalues.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    let mut inv = DVector::zeros(n);
    let mut shift = 0.0f64;
    for (a, &l) in eig.eigenvalues.iter().enumerate() {
        let m = l.abs().max(MODIFY_FLOOR * scale);
        shift = shift.max(m - l);
        inv[a] = 1.0 / m;
    }
    (
        Factored {
            block: Block {
                offset,
                scale: d,
                vecs: eig.eigenvectors,
                inv_vals: inv,
            },
            neg: 0,
            zero: 0,
        },
        shift,
    )
}

fn next_delta(d: f64) -> f64 {
    if d == 0.0 {
        DELTA_START
    } else {
        2.0 * d
    }
}

impl KktFactor {
    /// Factor `[H + diag(sigma) J; J^T 0]`, regularizing until the inertia is right.
    ///
    /// Since `W` is block diagonal, an object block that is not positive
    /// definite is repaired on its own first by taking absolute values of its
    /// eigenvalues (floored relative to the largest). Only if the whole matrix
    /// still has the wrong inertia are all blocks shifted by `delta I`,
    /// doubling from 1e-8.
    pub fn new(h_blocks: &[DMatrix<f64>], sigma: &[f64], j: &DMatrix<f64>) -> Result<Self> {
        let n: usize = h_blocks.iter().map(|b| b.nrows()).sum();
        if sigma.len() != n || j.nrows() != n {
            return Err(Error::param("KKT dimensions do not agree"));
        }
        let offsets: Vec<usize> = h_blocks
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.nrows();
                Some(o)
            })
            .collect();
        let mut deltas = vec![0.0; h_blocks.len()];
        let mut factored: Vec<Factored> = h_blocks
            .iter()
            .zip(&offsets)
            .map(|(h, &o)| factor_block(h, sigma, o, 0.0))
            .collect();
        let mut delta_c = 0.0;
        let mut blockwise_done = false;
        loop {
            let neg_w: usize = factored.iter().map(|f| f.neg).sum();
            let zero_w: usize = factored.iter().map(|f| f.zero).sum();
            if zero_w == 0 {
                match Self::try_schur(&factored, j, n, neg_w, delta_c) {
                    SchurOutcome::Ok(s_vecs, s_inv_vals, winv_j) => {
                        let delta = deltas.iter().cloned().fold(0.0, f64::max);
                        return Ok(Self {
                            blocks: factored.into_iter().map(|f| f.block).collect(),
                            j: j.clone(),
                            winv_j,
                            s_vecs,
                            s_inv_vals,
                            delta,
                            delta_c,
                        });
                    }
                    SchurOutcome::Singular if neg_w == 0 && delta_c == 0.0 => {
                        // rank-deficient constraint Jacobian
                        delta_c = DUAL_REG;
                        continue;
                    }
                    _ => {}
                }
            }
            if !blockwise_done {
                blockwise_done = true;
                for (b, h) in h_blocks.iter().enumerate() {
                    if factored[b].neg + factored[b].zero > 0 {
                        let (f, shift) = factor_block_modified(h, sigma, offsets[b]);
                        factored[b] = f;
                        deltas[b] = shift;
                    }
                }
                continue;
            }
            for (b, h) in h_blocks.iter().enumerate() {
                deltas[b] = next_delta(deltas[b]);
                if deltas[b] > DELTA_MAX {
                    return Err(Error::Solver("could not correct the inertia of the KKT matrix".into()));
                }
                factored[b] = factor_block(h, sigma, offsets[b], deltas[b]);
            }
        }
    }

    fn try_schur(factored: &[Factored], j: &DMatrix<f64>, n: usize, neg_w: usize, delta_c: f64) -> SchurOutcome {
        let m = j.ncols();
        let mut winv_j = DMatrix::zeros(n, m);
        for k in 0..m {
            let col: Vec<f64> = j.column(k).iter().copied().collect();
            for f in factored {
                let y = f.block.apply_inv(&col);
                for (a, v) in y.into_iter().enumerate() {
                    winv_j[(f.block.offset + a, k)] = v;
                }
            }
        }
        if m == 0 {
            return if neg_w == 0 {
                SchurOutcome::Ok(DMatrix::zeros(0, 0), DVector::zeros(0), winv_j)
            } else {
                SchurOutcome::WrongInertia
            };
        }
        let mut s = j.tr_mul(&winv_j);
        s = (&s + s.transpose()) * 0.5;
        for k in 0..m {
            s[(k, k)] += delta_c;
        }
        let eig = SymmetricEigen::new(s);
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let zero_s = eig
            .eigenvalues
            .iter()
            .filter(|l| l.abs() <= ZERO_EIG * scale.max(f64::MIN_POSITIVE))
            .count();
        let neg_s = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
        if zero_s > 0 {
            SchurOutcome::Singular
        } else if neg_s != neg_w {
            SchurOutcome::WrongInertia
        } else {
            let inv = eig.eigenvalues.map(|l| 1.0 / l);
            SchurOutcome::Ok(eig.eigenvectors, inv, winv_j)
        }
    }

    /// Solve for `(dx, dnu)` with right-hand side `-[r; c]`.
    pub fn solve(&self, r: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut winv_r = vec![0.0; r.len()];
        for b in &self.blocks {
            let y = b.apply_inv(r);
            winv_r[b.offset..b.offset + y.len()].copy_from_slice(&y);
        }
        let m = c.len();
        let dnu = if m == 0 {
            Vec::new()
        } else {
            // S dnu = c - J^T W^-1 r
            let rhs = DVector::from_column_slice(c) - self.j.tr_mul(&DVector::from_column_slice(&winv_r));
            let t = self.s_vecs.tr_mul(&rhs).component_mul(&self.s_inv_vals);
            (&self.s_vecs * t).iter().copied().collect::<Vec<_>>()
        };
        let mut dx: Vec<f64> = winv_r.iter().map(|v| -v).collect();
        if m > 0 {
            let corr = &self.winv_j * DVector::from_column_slice(&dnu);
            for (d, v) in dx.iter_mut().zip(corr.iter()) {
                *d -= v;
            }
        }
        (dx, dnu)
    }
}

#[derive(Clone, Debug)]
pub struct NewtonStep {
    pub dx: Vec<f64>,
    pub dnu: Vec<f64>,
    pub dz: Vec<f64>,
    pub delta: f64,
}

/// Primal-dual Newton step for the barrier problem.
///
/// `h_blocks` are the diagonal blocks of the Lagrangian Hessian, `j` is the
/// `n x m` constraint Jacobian and `gamma = grad f + J nu - z`.
pub fn newton_step(
    h_blocks: &[DMatrix<f64>],
    j: &DMatrix<f64>,
    gamma: &[f64],
    c: &[f64],
    x: &[f64],
    z: &[f64],
    eta: f64,
) -> Result<NewtonStep> {
    let n = x.len();
    if gamma.len() != n || z.len() != n || c.len() != j.ncols() {
        return Err(Error::param("Newton system dimensions do not agree"));
    }
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::param("x must be positive"));
    }
    let sigma: Vec<f64> = x.iter().zip(z).map(|(x, z)| z / x).collect();
    let factor = KktFactor::new(h_blocks, &sigma, j)?;
    let r: Vec<f64> = (0..n).map(|i| gamma[i] + z[i] - eta / x[i]).collect();
    let (dx, dnu) = factor.solve(&r, c);
    let dz = bound_multiplier_step(x, z, eta, &dx);
    Ok(NewtonStep {
        dx,
        dnu,
        dz,
        delta: factor.delta,
    })
}

pub(crate) fn bound_multiplier_step(x: &[f64], z: &[f64], eta: f64, dx: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| eta / x[i] - z[i] - z[i] / x[i] * dx[i])
        .collect()
}

/// Largest `alpha` in `[0, 1]` with `v + alpha dv >= (1 - eps) v`.
pub fn fraction_to_boundary(v: &[f64], dv: &[f64], eps: f64) -> f64 {
    let mut alpha = 1.0f64;
    for (&v, &d) in v.iter().zip(dv) {
        if d < 0.0 {
            alpha = alpha.min(-eps * v / d);
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_newton() {
        let h = vec![DMatrix::from_element(1, 1, 2.0)];
        let j = DMatrix::zeros(1, 0);
        let x = 3.0;
        let s = newton_step(&h, &j, &[2.0 * x], &[], &[x], &[0.0], 0.0).unwrap();
        assert_relative_eq!(s.dx[0], -x);
        assert_eq!(s.dz[0], 0.0);
    }

    #[test]
    fn identity_hessian_gives_gradient_step() {
        let h = vec![DMatrix::identity(3, 3)];
        let j = DMatrix::zeros(3, 0);
        let g = [0.5, -1.0, 2.0];
        let s = newton_step(&h, &j, &g, &[], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s.dx[i], -g[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn fraction_to_boundary_values() {
        assert_eq!(fraction_to_boundary(&[1.0, 2.0], &[0.5, 0.0], 0.9), 1.0);
        assert_relative_eq!(fraction_to_boundary(&[1.0], &[-1.0], 0.95), 0.95);
        assert_relative_eq!(fraction_to_boundary(&[2.0, 1.0], &[-4.0, -0.5], 0.9), 0.45);
    }

    #[test]
    fn indefinite_hessian_is_regularized() {
        let h = vec![DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])];
        let j = DMatrix::zeros(2, 0);
        let s = newton_step(&h, &j, &[1.0, 1.0], &[], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!(s.delta > 1.0);
        // descent for the regularized model
        assert!(s.dx[0] * 1.0 + s.dx[1] * 1.0 < 0.0);
    }
}
