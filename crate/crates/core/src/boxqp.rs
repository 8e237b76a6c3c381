//! Box-constrained quadratic programs
//! `min 1/2 v^T H v + c^T v` subject to `-1 <= v_n <= 1`.
//!
//! [`solve_boxqp`] is a primal active-set method with Cholesky solves on the
//! free block. [`solve_boxqp_oracle`] enumerates every active pattern and is
//! meant as an independent check for small problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::require_spd;

pub const KKT_TOL: f64 = 1e-8;
pub const LABEL_TOL: f64 = 1e-9;
pub const ORACLE_MAX_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxQpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordLabel {
    ClippedPlus,
    ClippedMinus,
    Snapping,
}

impl CoordLabel {
    pub fn is_clipped(self) -> bool {
        self != CoordLabel::Snapping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxQpSolution {
    pub v: DVector<f64>,
    /// Multipliers of `v_n <= 1`.
    pub alpha: DVector<f64>,
    /// Multipliers of `v_n >= -1`.
    pub beta: DVector<f64>,
    pub labels: Vec<CoordLabel>,
}

impl BoxQpProblem {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let p = Self { h, c };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.h.nrows() != self.c.len() {
            return Err(Error::DimensionMismatch { expected: self.h.nrows(), got: self.c.len() });
        }
        require_spd(&self.h, "QP matrix H").map_err(|e| match e {
            Error::NotPositiveDefinite(m) => Error::Domain(m),
            other => other,
        })
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.h * v)) + self.c.dot(v)
    }

    pub fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h * v + &self.c
    }

    /// Largest violation among stationarity, slackness and sign conditions.
    pub fn kkt_residual(&self, s: &BoxQpSolution) -> f64 {
        let stat = (self.gradient(&s.v) + &s.alpha - &s.beta).amax();
        let mut worst = stat;
        for n in 0..self.dim() {
            worst = worst
                .max((s.alpha[n] * (s.v[n] - 1.0)).abs())
                .max((s.beta[n] * (s.v[n] + 1.0)).abs())
                .max((-s.alpha[n]).max(0.0))
                .max((-s.beta[n]).max(0.0))
                .max((s.v[n].abs() - 1.0).max(0.0));
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Upper,
    Lower,
}

/// Solves the free block `H_FF v_F = -(c_F + H_FB v_B)` for a fixed pattern.
fn free_block_solve(p: &BoxQpProblem, pattern: &[Bound], lu: bool) -> Option<DVector<f64>> {
    let k = p.dim();
    let mut v = DVector::zeros(k);
    for (n, b) in pattern.iter().enumerate() {
        v[n] = match b {
            Bound::Upper => 1.0,
            Bound::Lower => -1.0,
            Bound::Free => 0.0,
        };
    }
    let free: Vec<usize> = (0..k).filter(|&n| pattern[n] == Bound::Free).collect();
    if free.is_empty() {
        return Some(v);
    }
    let hff = DMatrix::from_fn(free.len(), free.len(), |i, j| p.h[(free[i], free[j])]);
    let hv = &p.h * &v;
    let rhs = DVector::from_fn(free.len(), |i, _| -(p.c[free[i]] + hv[free[i]]));
    let sol = if lu {
        hff.lu().solve(&rhs)?
    } else {
        hff.cholesky()?.solve(&rhs)
    };
    for (i, &n) in free.iter().enumerate() {
        v[n] = sol[i];
    }
    Some(v)
}

/// Builds multipliers and labels from a feasible point.
fn certify(p: &BoxQpProblem, mut v: DVector<f64>) -> BoxQpSolution {
    let k = p.dim();
    for n in 0..k {
        if (v[n] - 1.0).abs() <= LABEL_TOL {
            v[n] = 1.0;
        } else if (v[n] + 1.0).abs() <= LABEL_TOL {
            v[n] = -1.0;
        }
    }
    let g = p.gradient(&v);
    let mut alpha = DVector::zeros(k);
    let mut beta = DVector::zeros(k);
    let mut labels = Vec::with_capacity(k);
    for n in 0..k {
        let label = if v[n] == 1.0 {
            alpha[n] = (-g[n]).max(0.0);
            CoordLabel::ClippedPlus
        } else if v[n] == -1.0 {
            beta[n] = g[n].max(0.0);
            CoordLabel::ClippedMinus
        } else {
            CoordLabel::Snapping
        };
        if label.is_clipped() && alpha[n].max(beta[n]) <= KKT_TOL {
            log::warn!("coordinate {n} sits on the box boundary with a zero multiplier; labelled clipped");
        }
        labels.push(label);
    }
    BoxQpSolution { v, alpha, beta, labels }
}

/// Unique minimiser of the box QP with its KKT certificate.
pub fn solve_boxqp(p: &BoxQpProblem) -> Result<BoxQpSolution> {
    p.validate()?;
    let k = p.dim();
    let mut pattern = vec![Bound::Free; k];
    let mut v = DVector::zeros(k);
    let max_iter = 50 * (k + 1) * (k + 1);
    for _ in 0..max_iter {
        let target = free_block_solve(p, &pattern, false)
            .ok_or_else(|| Error::QpFailure("free block is not positive definite".into()))?;
        let step = &target - &v;
        // longest feasible fraction of the step, with its blocking coordinate
        let mut frac = 1.0;
        let mut blocking = None;
        for n in 0..k {
            if pattern[n] != Bound::Free {
                continue;
            }
            let room = if step[n] > 0.0 {
                (1.0 - v[n]) / step[n]
            } else if step[n] < 0.0 {
                (-1.0 - v[n]) / step[n]
            } else {
                f64::INFINITY
            };
            if room < frac {
                frac = room.max(0.0);
                blocking = Some((n, if step[n] > 0.0 { Bound::Upper } else { Bound::Lower }));
            }
        }
        v += step * frac;
        if let Some((n, b)) = blocking {
            pattern[n] = b;
            v[n] = if b == Bound::Upper { 1.0 } else { -1.0 };
            continue;
        }
        v = target;
        let g = p.gradient(&v);
        // release the bound with the most negative multiplier
        let mut worst = (-KKT_TOL * 1e-2, None);
        for n in 0..k {
            let mult = match pattern[n] {
                Bound::Upper => -g[n],
                Bound::Lower => g[n],
                Bound::Free => continue,
            };
            if mult < worst.0 {
                worst = (mult, Some(n));
            }
        }
        match worst.1 {
            Some(n) => pattern[n] = Bound::Free,
            None => {
                let sol = certify(p, v);
                let res = p.kkt_residual(&sol);
                if res > KKT_TOL {
                    return Err(Error::QpFailure(format!("KKT residual {res:e} after convergence")));
                }
                return Ok(sol);
            }
        }
    }
    Err(Error::QpFailure(format!("active set did not settle in {max_iter} iterations")))
}

/// Brute-force solution over all `3^K` active patterns using LU solves.
pub fn solve_boxqp_oracle(p: &BoxQpProblem) -> Result<BoxQpSolution> {
    p.validate()?;
    let k = p.dim();
    if k > ORACLE_MAX_DIM {
        return Err(Error::Size(format!("oracle handles K <= {ORACLE_MAX_DIM}, got {k}")));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut pattern = vec![Bound::Free; k];
    for code in 0..3usize.pow(k as u32) {
        let mut rest = code;
        for slot in pattern.iter_mut() {
            *slot = match rest % 3 {
                0 => Bound::Free,
                1 => Bound::Upper,
                _ => Bound::Lower,
            };
            rest /= 3;
        }
        let Some(v) = free_block_solve(p, &pattern, true) else {
            continue;
        };
        if v.iter().any(|x| x.abs() > 1.0 + 1e-12) {
            continue;
        }
        let g = p.gradient(&v);
        let consistent = pattern.iter().enumerate().all(|(n, b)| match b {
            Bound::Upper => -g[n] >= -1e-10,
            Bound::Lower => g[n] >= -1e-10,
            Bound::Free => true,
        });
        if !consistent {
            continue;
        }
        let f = p.objective(&v);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, v));
        }
    }
    let (_, v) = best.ok_or_else(|| Error::QpFailure("no KKT-consistent pattern".into()))?;
    Ok(certify(p, v))
}

/// Indices of clipped and snapping coordinates.
pub fn classify(sol: &BoxQpSolution) -> (Vec<usize>, Vec<usize>) {
    (0..sol.v.len()).partition(|&n| (sol.v[n].abs() - 1.0).abs() <= LABEL_TOL)
}
