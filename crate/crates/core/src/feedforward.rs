//! Feedforward data of the non-equal-speed target systems.
//!
//! For `LambdaFaster` the target couples `beta` to `alpha(-w)` through
//! `p(w)` and to both states through `D+`, `D-`; for `MuFaster` it couples
//! `alpha` through `q(w)`, `K+`, `K-`. For every fixed `w` with `W = |w|`,
//! `s in [-W, W]`:
//!
//! ```text
//! X+(s) - int_{|s|}^{W} [X+(z) A(s,z) + X-(z) C(s,z) - X+(-z) A(s,-z) - X-(-z) C(s,-z)] dz = -r(w) P(s,-w)
//! ```
//!
//! with `(A, C) = (L11, L21)` for `X+` and `(L12, L22)` for `X-`, and
//! `P = L11, L12` (first case) or `L21, L22` (second case). Columns are
//! independent; each is a second-kind Volterra system in the level `|s|`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CoefficientProfile, SpeedCase};
use crate::grid::PlantGrid;
use crate::kernel::{KernelName, KernelTable};

pub const DEFAULT_VOLTERRA_TOL: f64 = 1e-12;
pub const MAX_VOLTERRA_ITERATIONS: usize = 500;
const GROWTH_LIMIT: usize = 5;

/// `p` (or `q`) and the two integral kernels on plant-grid pairs
/// `(z_j, w_k)`, `|z_j| <= |w_k|`.
#[derive(Debug, Clone)]
pub struct FeedforwardKernels {
    case: SpeedCase,
    grid: PlantGrid,
    reflection: Vec<f64>,
    plus: Vec<f64>,
    minus: Vec<f64>,
    /// Neumann iterations used by the slowest column.
    pub iterations: usize,
}

impl FeedforwardKernels {
    pub fn case(&self) -> SpeedCase {
        self.case
    }

    pub fn grid(&self) -> &PlantGrid {
        &self.grid
    }

    /// `p(w_k)` or `q(w_k)`.
    pub fn reflection(&self) -> &[f64] {
        &self.reflection
    }

    /// `D+(z_j, w_k)` or `K+(z_j, w_k)`.
    #[inline]
    pub fn plus(&self, j: usize, k: usize) -> f64 {
        self.plus[k * self.grid.len() + j]
    }

    #[inline]
    pub fn minus(&self, j: usize, k: usize) -> f64 {
        self.minus[k * self.grid.len() + j]
    }

    pub fn plus_row(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.plus[k * n..(k + 1) * n]
    }

    pub fn minus_row(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.minus[k * n..(k + 1) * n]
    }

    pub fn sup_norm(&self) -> f64 {
        self.plus
            .iter()
            .chain(&self.minus)
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// CSV dump in the kernel layout: `case,kernel,w,z,value,region`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "case,kernel,w,z,value,region")?;
        let (pn, mn) = match self.case {
            SpeedCase::MuFaster => ("K+", "K-"),
            _ => ("D+", "D-"),
        };
        let g = &self.grid;
        for (name, field) in [(pn, &self.plus), (mn, &self.minus)] {
            for k in 0..g.len() {
                let (lo, hi) = g.span(k);
                for j in lo..=hi {
                    writeln!(
                        out,
                        "{},{},{:.16e},{:.16e},{:.16e},NA",
                        self.case.number(),
                        name,
                        g.w(k),
                        g.w(j),
                        field[k * g.len() + j]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// `p(w) = (mu(w) - lambda(-w)) L21(-w, w)`, the coefficient of the
/// reflected term in the `LambdaFaster` target.
pub fn compute_p(table: &KernelTable, profile: &CoefficientProfile) -> Result<Vec<f64>> {
    if table.case() != SpeedCase::LambdaFaster {
        return Err(Error::WrongCase {
            expected: "LambdaFaster",
            found: table.case(),
        });
    }
    let g = table.grid();
    Ok((0..g.len())
        .map(|k| {
            let w = g.w(k);
            (profile.mu(w) - profile.lambda(-w)) * table.get(KernelName::L21, g.mirror(k), k)
        })
        .collect())
}

/// `q(w) = (mu(-w) - lambda(w)) L12(-w, w)` for `MuFaster`.
pub fn compute_q(table: &KernelTable, profile: &CoefficientProfile) -> Result<Vec<f64>> {
    if table.case() != SpeedCase::MuFaster {
        return Err(Error::WrongCase {
            expected: "MuFaster",
            found: table.case(),
        });
    }
    let g = table.grid();
    Ok((0..g.len())
        .map(|k| {
            let w = g.w(k);
            (profile.mu(-w) - profile.lambda(w)) * table.get(KernelName::L12, g.mirror(k), k)
        })
        .collect())
}

/// Solves for `D+-` (or `K+-`) given the reflection coefficient on the
/// table's grid.
pub fn solve_feedforward(
    table: &KernelTable,
    reflection: &[f64],
    tol: f64,
) -> Result<FeedforwardKernels> {
    let g = *table.grid();
    g.check_len("reflection coefficient", reflection.len())?;
    let (p_plus, p_minus) = match table.case() {
        SpeedCase::LambdaFaster => (KernelName::L11, KernelName::L12),
        SpeedCase::MuFaster => (KernelName::L21, KernelName::L22),
        SpeedCase::Equal => {
            return Err(Error::WrongCase {
                expected: "LambdaFaster or MuFaster",
                found: SpeedCase::Equal,
            })
        }
    };
    let n = g.len();
    let mut rhs_plus = vec![0.0; n * n];
    let mut rhs_minus = vec![0.0; n * n];
    for k in 0..n {
        let (lo, hi) = g.span(k);
        let km = g.mirror(k);
        for j in lo..=hi {
            rhs_plus[k * n + j] = -reflection[k] * table.get(p_plus, j, km);
            rhs_minus[k * n + j] = -reflection[k] * table.get(p_minus, j, km);
        }
    }
    let mut out = solve_feedforward_with_rhs(table, &rhs_plus, &rhs_minus, tol)?;
    out.reflection = reflection.to_vec();
    Ok(out)
}

/// Same column systems with an arbitrary right-hand side (dense `n x n`,
/// row `k` holds column `w_k`). Used for manufactured-solution checks.
pub fn solve_feedforward_with_rhs(
    table: &KernelTable,
    rhs_plus: &[f64],
    rhs_minus: &[f64],
    tol: f64,
) -> Result<FeedforwardKernels> {
    let g = *table.grid();
    let n = g.len();
    if rhs_plus.len() != n * n || rhs_minus.len() != n * n {
        return Err(Error::GridMismatch(format!(
            "right-hand side must have {} entries",
            n * n
        )));
    }
    let columns: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|k| {
            solve_column(
                table,
                k,
                &rhs_plus[k * n..(k + 1) * n],
                &rhs_minus[k * n..(k + 1) * n],
                tol,
            )
        })
        .collect::<Result<_>>()?;
    let mut plus = Vec::with_capacity(n * n);
    let mut minus = Vec::with_capacity(n * n);
    let mut iterations = 0;
    for (p, m, it) in columns {
        plus.extend(p);
        minus.extend(m);
        iterations = iterations.max(it);
    }
    Ok(FeedforwardKernels {
        case: table.case(),
        grid: g,
        reflection: vec![0.0; n],
        plus,
        minus,
        iterations,
    })
}

fn solve_column(
    table: &KernelTable,
    k: usize,
    rhs_plus: &[f64],
    rhs_minus: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let g = table.grid();
    let n = g.len();
    let c = g.center();
    let m = k.abs_diff(c);
    let mut xp = vec![0.0; n];
    let mut xm = vec![0.0; n];
    let (lo, hi) = g.span(k);
    xp[lo..=hi].copy_from_slice(&rhs_plus[lo..=hi]);
    xm[lo..=hi].copy_from_slice(&rhs_minus[lo..=hi]);
    if m == 0 {
        return Ok((xp, xm, 0));
    }
    let dx = g.dx();
    let weight = |l: usize, lp: usize| {
        if lp == l || lp == m {
            0.5 * dx
        } else {
            dx
        }
    };

    let mut prev_inc = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=MAX_VOLTERRA_ITERATIONS {
        let mut np = vec![0.0; n];
        let mut nm = vec![0.0; n];
        let mut inc = 0.0_f64;
        for j in lo..=hi {
            let l = j.abs_diff(c);
            let (mut ip, mut im) = (0.0, 0.0);
            for lp in l..=m {
                if lp == 0 || l == m {
                    continue;
                }
                let (zp, zn) = (c + lp, c - lp);
                let wt = weight(l, lp);
                let (a, b, cc, d) = (xp[zp], xm[zp], xp[zn], xm[zn]);
                ip += wt
                    * (a * table.get(KernelName::L11, j, zp)
                        + b * table.get(KernelName::L21, j, zp)
                        - cc * table.get(KernelName::L11, j, zn)
                        - d * table.get(KernelName::L21, j, zn));
                im += wt
                    * (a * table.get(KernelName::L12, j, zp)
                        + b * table.get(KernelName::L22, j, zp)
                        - cc * table.get(KernelName::L12, j, zn)
                        - d * table.get(KernelName::L22, j, zn));
            }
            np[j] = rhs_plus[j] + ip;
            nm[j] = rhs_minus[j] + im;
            inc = inc.max((np[j] - xp[j]).abs()).max((nm[j] - xm[j]).abs());
        }
        xp = np;
        xm = nm;
        if !inc.is_finite() {
            return Err(Error::NoConvergence {
                stage: "feedforward Volterra iteration",
                iterations: it,
                last_increment: inc,
            });
        }
        if inc <= tol {
            return Ok((xp, xm, it));
        }
        if inc > prev_inc {
            growth += 1;
            if growth >= GROWTH_LIMIT {
                return Err(Error::NoConvergence {
                    stage: "feedforward Volterra iteration",
                    iterations: it,
                    last_increment: inc,
                });
            }
        } else {
            growth = 0;
        }
        prev_inc = inc;
    }
    Err(Error::NoConvergence {
        stage: "feedforward Volterra iteration",
        iterations: MAX_VOLTERRA_ITERATIONS,
        last_increment: prev_inc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(
        nodes: usize,
        case: SpeedCase,
        f: impl Fn(KernelName, f64, f64) -> f64,
    ) -> KernelTable {
        KernelTable::from_fn(PlantGrid::new(nodes).unwrap(), case, f)
    }

    #[test]
    fn zero_reflection_gives_zero_fields() {
        let t = table(41, SpeedCase::LambdaFaster, |_, z, w| 0.3 + z - w);
        let ff = solve_feedforward(&t, &[0.0; 41], 1e-12).unwrap();
        assert_eq!(ff.sup_norm(), 0.0);
    }

    #[test]
    fn zero_kernels_give_zero_fields() {
        let t = table(41, SpeedCase::LambdaFaster, |_, _, _| 0.0);
        let p: Vec<f64> = (0..41).map(|k| k as f64).collect();
        let ff = solve_feedforward(&t, &p, 1e-12).unwrap();
        assert_eq!(ff.sup_norm(), 0.0);
    }

    #[test]
    fn equal_case_is_rejected() {
        let t = table(11, SpeedCase::Equal, |_, _, _| 0.0);
        assert!(matches!(
            solve_feedforward(&t, &[0.0; 11], 1e-12),
            Err(Error::WrongCase { .. })
        ));
    }

    #[test]
    fn doubling_reflection_doubles_fields() {
        let t = table(41, SpeedCase::LambdaFaster, |name, z, w| {
            0.2 * (name as usize as f64 + 1.0) * (z + 0.5 * w).cos()
        });
        let p: Vec<f64> = t.grid().sample(|w| 1.0 + w * w);
        let p2: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let a = solve_feedforward(&t, &p, 1e-13).unwrap();
        let b = solve_feedforward(&t, &p2, 1e-13).unwrap();
        for k in 0..41 {
            for j in 0..41 {
                assert!((2.0 * a.plus(j, k) - b.plus(j, k)).abs() < 1e-10);
                assert!((2.0 * a.minus(j, k) - b.minus(j, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn solution_satisfies_discrete_equations() {
        // D+ at the top level s = W only sees the right-hand side.
        let t = table(21, SpeedCase::MuFaster, |_, z, w| 0.5 + z * w);
        let q: Vec<f64> = t.grid().sample(|w| 0.7 - w);
        let ff = solve_feedforward(&t, &q, 1e-13).unwrap();
        let g = t.grid();
        for k in 0..21 {
            let (lo, hi) = g.span(k);
            let km = g.mirror(k);
            for j in [lo, hi] {
                let want = -q[k] * t.get(KernelName::L21, j, km);
                assert!((ff.plus(j, k) - want).abs() < 1e-14);
            }
        }
    }
}
