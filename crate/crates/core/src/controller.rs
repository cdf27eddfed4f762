//! Boundary feedback laws and the backstepping transform.
//!
//! `U1 = -int (L11(z,-1) u + L12(z,-1) v) dz`, `U2 = int (L21(z,1) u + L22(z,1) v) dz`,
//! `alpha = u - int_{-w}^{w} (L11 u + L12 v) dz`, `beta = v - int_{-w}^{w} (L21 u + L22 v) dz`.

use serde::Serialize;

use crate::error::Result;
use crate::geometry::{Phi, PhiMaps, SpeedCase};
use crate::grid::PlantGrid;
use crate::kernel::{KernelGrid, KernelName, KernelTable};
use crate::simulator::{BoundaryFeedback, PlantState, TargetState};

/// Guaranteed settling time: the larger transport time for equal speeds,
/// the full `phi3` span otherwise.
pub fn settling_time(phi: &PhiMaps, case: SpeedCase) -> f64 {
    match case {
        SpeedCase::Equal => phi.span(Phi::One).max(phi.span(Phi::Two)),
        _ => phi.span(Phi::Three),
    }
}

/// Kernel traces at `w = -1` (`g11`, `g12`) and `w = 1` (`g21`, `g22`) on
/// the plant grid.
#[derive(Debug, Clone, Serialize)]
pub struct ControlGains {
    pub case: SpeedCase,
    pub tf: f64,
    #[serde(skip)]
    grid: PlantGrid,
    pub g11: Vec<f64>,
    pub g12: Vec<f64>,
    pub g21: Vec<f64>,
    pub g22: Vec<f64>,
}

pub fn gains_from_table(table: &KernelTable, phi: &PhiMaps) -> ControlGains {
    let g = *table.grid();
    let top = g.len() - 1;
    ControlGains {
        case: table.case(),
        tf: settling_time(phi, table.case()),
        grid: g,
        g11: table.row(KernelName::L11, 0).to_vec(),
        g12: table.row(KernelName::L12, 0).to_vec(),
        g21: table.row(KernelName::L21, top).to_vec(),
        g22: table.row(KernelName::L22, top).to_vec(),
    }
}

pub fn gains_from_kernels(kernels: &KernelGrid, phi: &PhiMaps, grid: PlantGrid) -> ControlGains {
    gains_from_table(&KernelTable::new(kernels, grid), phi)
}

impl ControlGains {
    pub fn grid(&self) -> &PlantGrid {
        &self.grid
    }

    /// `(z, g11, g12, g21, g22)` rows for CSV output.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 5]> + '_ {
        (0..self.grid.len()).map(|j| {
            [
                self.grid.w(j),
                self.g11[j],
                self.g12[j],
                self.g21[j],
                self.g22[j],
            ]
        })
    }
}

/// `dx * sum' (a_j x_j + b_j y_j)` over `lo..=hi` with half weights at the
/// ends.
#[inline]
fn trapezoid_pair(
    a: &[f64],
    b: &[f64],
    x: &[f64],
    y: &[f64],
    lo: usize,
    hi: usize,
    dx: f64,
) -> f64 {
    if hi == lo {
        return 0.0;
    }
    let mut acc = 0.5 * (a[lo] * x[lo] + b[lo] * y[lo]);
    for j in lo + 1..hi {
        acc += a[j] * x[j] + b[j] * y[j];
    }
    acc += 0.5 * (a[hi] * x[hi] + b[hi] * y[hi]);
    acc * dx
}

/// Control values for the state as given (boundary nodes included).
pub fn evaluate_controls(u: &[f64], v: &[f64], gains: &ControlGains) -> (f64, f64) {
    let g = &gains.grid;
    let (lo, hi, dx) = (0, g.len() - 1, g.dx());
    let u1 = -trapezoid_pair(&gains.g11, &gains.g12, u, v, lo, hi, dx);
    let u2 = trapezoid_pair(&gains.g21, &gains.g22, u, v, lo, hi, dx);
    (u1, u2)
}

impl BoundaryFeedback for ControlGains {
    /// Both laws contain the boundary nodes they set, through the trapezoid
    /// end weights, so the inputs solve a 2x2 system.
    fn boundary_inputs(&self, _t: f64, u: &[f64], v: &[f64]) -> (f64, f64) {
        let n = self.grid.len();
        let h = 0.5 * self.grid.dx();
        let mut u0 = u.to_vec();
        let mut v0 = v.to_vec();
        u0[0] = 0.0;
        v0[n - 1] = 0.0;
        let (r1, r2) = evaluate_controls(&u0, &v0, self);
        // (1 + h g11_0) U1 + h g12_n U2 = r1
        // -h g21_0 U1 + (1 - h g22_n) U2 = r2
        let (a11, a12) = (1.0 + h * self.g11[0], h * self.g12[n - 1]);
        let (a21, a22) = (-h * self.g21[0], 1.0 - h * self.g22[n - 1]);
        let det = a11 * a22 - a12 * a21;
        ((r1 * a22 - a12 * r2) / det, (a11 * r2 - a21 * r1) / det)
    }
}

/// `(alpha, beta)` of a plant state, by signed trapezoid over `[-w, w]`.
pub fn backstepping_transform(state: &PlantState, table: &KernelTable) -> Result<TargetState> {
    let g = table.grid();
    g.check_len("u", state.u.len())?;
    g.check_len("v", state.v.len())?;
    let n = g.len();
    let (u, v) = (&state.u, &state.v);
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for k in 0..n {
        let (lo, hi) = g.span(k);
        let sign = g.w(k).signum();
        let ia = trapezoid_pair(
            table.row(KernelName::L11, k),
            table.row(KernelName::L12, k),
            u,
            v,
            lo,
            hi,
            g.dx(),
        );
        let ib = trapezoid_pair(
            table.row(KernelName::L21, k),
            table.row(KernelName::L22, k),
            u,
            v,
            lo,
            hi,
            g.dx(),
        );
        alpha[k] = u[k] - sign * ia;
        beta[k] = v[k] - sign * ib;
    }
    Ok(TargetState {
        t: state.t,
        alpha,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_table(n: usize) -> KernelTable {
        KernelTable::from_fn(
            PlantGrid::new(n).unwrap(),
            SpeedCase::Equal,
            |name, _, _| {
                if name == KernelName::L11 {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    fn phi() -> PhiMaps {
        let p = crate::geometry::CoefficientProfile::constant(1.0, 1.0, 0.0, 0.0, 64).unwrap();
        crate::geometry::build_phi_maps(&p, 257).unwrap()
    }

    #[test]
    fn unit_gain_integrates_state() {
        let gains = gains_from_table(&unit_table(41), &phi());
        let u = vec![1.0; 41];
        let v = vec![0.0; 41];
        let (u1, u2) = evaluate_controls(&u, &v, &gains);
        assert!((u1 + 2.0).abs() < 1e-14);
        assert_eq!(u2, 0.0);
    }

    #[test]
    fn controls_are_linear() {
        let t = KernelTable::from_fn(PlantGrid::new(41).unwrap(), SpeedCase::Equal, |n, z, w| {
            (n as usize as f64 + 1.0) * (z - 0.3 * w).sin()
        });
        let gains = gains_from_table(&t, &phi());
        let g = PlantGrid::new(41).unwrap();
        let u = g.sample(|w| w.exp());
        let v = g.sample(|w| 1.0 - w * w);
        let (a1, a2) = evaluate_controls(&u, &v, &gains);
        let su: Vec<f64> = u.iter().map(|x| 3.0 * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let (b1, b2) = evaluate_controls(&su, &sv, &gains);
        assert!((3.0 * a1 - b1).abs() < 1e-13 && (3.0 * a2 - b2).abs() < 1e-13);
    }

    #[test]
    fn closure_zeroes_transformed_boundary_values() {
        let g = PlantGrid::new(41).unwrap();
        let t = KernelTable::from_fn(g, SpeedCase::Equal, |n, z, w| {
            0.4 * (n as usize as f64 + 1.0) * (z + w).cos()
        });
        let gains = gains_from_table(&t, &phi());
        let mut u = g.sample(|w| 2.0 + w);
        let mut v = g.sample(|w| w * w - 0.5);
        let (u1, u2) = gains.boundary_inputs(0.0, &u, &v);
        u[0] = u1;
        v[40] = u2;
        let state = PlantState::new(&g, u, v).unwrap();
        let target = backstepping_transform(&state, &t).unwrap();
        let scale = 1.0 + state.l2_norm(&g);
        assert!(target.alpha[0].abs() <= 1e-13 * scale);
        assert!(target.beta[40].abs() <= 1e-13 * scale);
    }

    #[test]
    fn zero_kernels_give_identity_transform() {
        let g = PlantGrid::new(21).unwrap();
        let t = KernelTable::from_fn(g, SpeedCase::Equal, |_, _, _| 0.0);
        let s = PlantState::from_fn(&g, |w| w, |w| w * w);
        let target = backstepping_transform(&s, &t).unwrap();
        assert_eq!(target.alpha, s.u);
        assert_eq!(target.beta, s.v);
    }
}
